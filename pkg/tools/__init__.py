"""
Numerical core: scans, cross-scan block, correlation pyramid, refinement, scenes, metrics and I/O
"""
