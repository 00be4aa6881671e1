"""Operational shell: datasets, training/evaluation loops, the UDP channel
emulator, end-to-end link simulation, sweeps and reports."""
