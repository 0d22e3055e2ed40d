"""Dense homography-based visual-inertial odometry for downward-facing cameras."""

__version__ = "0.1.0"
