"""Oversegmentation and greedy tracking of RGBD frames into tracklets."""
from .segment import SegmentMask, segment, segment_labels, masks_from_labels
from .tracking import (
    TrackClassifier,
    Tracker,
    Tracklet,
    TrackWeights,
    fit_track_classifier,
    greedy_assign,
    match,
    read_tracklet_archive,
    segment_neighbors,
    tracking_error,
    tracking_features,
    write_tracklet_archive,
)
from .zernike import zernike_descriptor

__all__ = [
    "SegmentMask", "segment", "segment_labels", "masks_from_labels", "TrackClassifier",
    "Tracker", "Tracklet", "TrackWeights", "fit_track_classifier", "greedy_assign", "match",
    "read_tracklet_archive", "segment_neighbors", "tracking_error", "tracking_features",
    "write_tracklet_archive", "zernike_descriptor",
]
