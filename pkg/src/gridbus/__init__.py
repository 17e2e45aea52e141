"""Modbus/TCP security testbed.

Emulated outstations and masters exchange real Modbus/TCP traffic (in-memory
deterministic transport or real sockets), a man-in-the-middle proxy tampers
with frames in flight, an attack toolkit drives the reconnaissance/scanning/
exploitation/maintaining-access cycle, every frame is recorded at Wireshark-
style taps, a detection engine turns captures into findings, and an
authenticated encrypted session layer provides the mitigation path.
"""

__version__ = "0.1.0"
