"""Dense depth completion from sparse LiDAR with RGB guidance and confidence fusion."""

__version__ = "0.1.0"
