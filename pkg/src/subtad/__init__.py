"""Sub-trajectory anomaly detection on hexagonal cell sequences."""
from .estimators import CellSequencer, SubTrajectoryDetector
from .online import StreamDetector, make_states, reward, vote_points
from .spatial import CellTrajectory, GeoPoint, H3Indexer, HexGridIndexer, RawTrajectory

__all__ = [
    "CellSequencer", "SubTrajectoryDetector", "StreamDetector", "make_states", "reward", "vote_points",
    "CellTrajectory", "GeoPoint", "H3Indexer", "HexGridIndexer", "RawTrajectory",
]
__version__ = "0.1.0"
