"""Tightly coupled lidar, visual, inertial and UWB odometry with a global map,
loop closure and online UWB anchor calibration, plus a synthetic data generator."""

__version__ = "0.1.0"
