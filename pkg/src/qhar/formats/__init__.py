"""File formats: QHW1 weights, network config text, PGM/PPM frames."""
