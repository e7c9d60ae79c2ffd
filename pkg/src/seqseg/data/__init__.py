"""Volume I/O, preprocessing, spatial-context extraction, scan-level splits
and synthetic volume generation."""
