"""File formats: DTC1 tensor container, binary PPM images, flat run configs."""
