"""
Per-image measurements (areas, counts, intensity ratios, puncta spread) and
the rank-sum group statistics used to compare conditions.

Images are (C, H, W) in [-1, 1]; measurements operate on (x + 1) / 2.
"""

import logging
from typing import Iterable, List, Literal, Optional, Sequence, Union

import numpy as np
import pandas as pd
import torch
from scipy import ndimage
from scipy.spatial.distance import pdist
from scipy.stats import mannwhitneyu
from skimage.filters import threshold_otsu
from skimage.measure import label, regionprops

from phenldiff.middleware.exceptions import ConfigError, DataError, InsufficientDataError, UndefinedMeasureError
from phenldiff.schemas import GroupComparison, GroupSummary, MeasurementName, MeasurementRow

logger = logging.getLogger(__name__)

ThresholdMethod = Literal["otsu", "fixed"]
ImageLike = Union[torch.Tensor, np.ndarray]


def to_unit(image: ImageLike) -> np.ndarray:
    array = image.detach().cpu().double().numpy() if isinstance(image, torch.Tensor) else np.asarray(image, dtype=np.float64)
    if array.size == 0:
        raise DataError("empty image")
    if array.ndim == 2:
        array = array[None]
    return (array + 1.0) / 2.0


def _channel(image: ImageLike, channel: int) -> np.ndarray:
    pixels = to_unit(image)
    if not 0 <= channel < pixels.shape[0]:
        raise ConfigError("channel", f"channel {channel} not in image with {pixels.shape[0]} channels")
    return pixels[channel]


def threshold_value(channel: np.ndarray, method: ThresholdMethod = "otsu", fixed: float = 0.5) -> float:
    if method == "fixed":
        return fixed
    if method != "otsu":
        raise ConfigError("threshold_method", f"unknown threshold method '{method}'")
    if np.ptp(channel) == 0:
        # constant channel: foreground is anything above zero
        return 0.0
    return float(threshold_otsu(channel))


def foreground(channel: np.ndarray, method: ThresholdMethod = "otsu", fixed: float = 0.5) -> np.ndarray:
    return channel > threshold_value(channel, method, fixed)


def channel_area(
    image: ImageLike, channel: int, threshold_method: ThresholdMethod = "otsu", threshold: float = 0.5
) -> float:
    """Fraction of pixels above threshold."""
    return float(foreground(_channel(image, channel), threshold_method, threshold).mean())


def object_count(
    image: ImageLike,
    channel: int,
    threshold_method: ThresholdMethod = "otsu",
    threshold: float = 0.5,
    min_size: int = 1,
) -> int:
    """Connected components (8-connectivity) of at least min_size pixels."""
    if min_size < 1:
        raise ConfigError("min_size", f"min_size must be >= 1, got {min_size}")
    mask = foreground(_channel(image, channel), threshold_method, threshold)
    return sum(1 for region in regionprops(label(mask, connectivity=2)) if region.area >= min_size)


def nuclear_cytoplasm_ratio(image: ImageLike, nucleus_channel: int = 2, marker_channel: int = 1) -> float:
    """Marker intensity inside nucleus masks over marker intensity outside them."""
    nuclei = ndimage.binary_fill_holes(foreground(_channel(image, nucleus_channel)))
    if not nuclei.any():
        raise UndefinedMeasureError("nuclear_cytoplasm_ratio", "no nuclei found")
    marker = _channel(image, marker_channel)
    total = float(marker.sum())
    if total == 0:
        raise UndefinedMeasureError("nuclear_cytoplasm_ratio", "marker channel is empty")
    inside = float(marker[nuclei].sum())
    outside = float(marker[~nuclei].sum())
    return inside / (outside + 1e-6 * total)


def puncta_centroids(image: ImageLike, channel: int, threshold_method: ThresholdMethod = "otsu") -> np.ndarray:
    mask = foreground(_channel(image, channel), threshold_method)
    regions = regionprops(label(mask, connectivity=2))
    return np.array([region.centroid for region in regions]).reshape(-1, 2)


def puncta_dispersion(
    image: ImageLike, channel: int, threshold_method: ThresholdMethod = "otsu"
) -> Optional[float]:
    """Mean pairwise centroid distance in pixels; None when fewer than two puncta are found."""
    centroids = puncta_centroids(image, channel, threshold_method)
    if len(centroids) < 2:
        return None
    return float(pdist(centroids).mean())


def measure_value(
    image: ImageLike,
    measurement: MeasurementName,
    channel: int,
    nucleus_channel: int = 2,
    threshold_method: ThresholdMethod = "otsu",
) -> Optional[float]:
    """One measurement by name; None marks an undefined value."""
    if measurement == "area_fraction":
        return channel_area(image, channel, threshold_method)
    if measurement == "object_count":
        return float(object_count(image, channel, threshold_method))
    if measurement == "nuclear_cytoplasm_ratio":
        try:
            return nuclear_cytoplasm_ratio(image, nucleus_channel, channel)
        except UndefinedMeasureError:
            return None
    if measurement == "puncta_dispersion":
        return puncta_dispersion(image, channel, threshold_method)
    raise ConfigError("measurement", f"unknown measurement '{measurement}'")


def measure_images(
    images: Iterable[ImageLike],
    image_ids: Sequence[str],
    condition: Union[str, Sequence[str]],
    measurement: MeasurementName,
    channel: int,
    nucleus_channel: int = 2,
    threshold_method: ThresholdMethod = "otsu",
) -> List[MeasurementRow]:
    conditions = [condition] * len(image_ids) if isinstance(condition, str) else list(condition)
    rows = []
    for image, image_id, cond in zip(images, image_ids, conditions):
        value = measure_value(image, measurement, channel, nucleus_channel, threshold_method)
        if value is None:
            logger.warning(f"{measurement} undefined for {image_id}", extra={"image_id": image_id})
        rows.append(
            MeasurementRow(
                image_id=image_id,
                condition=cond,
                channel=channel,
                measurement=measurement,
                value=value,
                defined=value is not None,
                threshold_method=threshold_method,
            )
        )
    return sorted(rows, key=lambda r: r.image_id)


def rows_frame(rows: Sequence[MeasurementRow]) -> pd.DataFrame:
    return pd.DataFrame([row.model_dump() for row in rows], columns=list(MeasurementRow.model_fields))


def _summary(values: np.ndarray) -> GroupSummary:
    q1, median, q3 = np.percentile(values, [25, 50, 75])
    return GroupSummary(n=len(values), median=float(median), iqr=float(q3 - q1))


def _defined(values: Sequence[Optional[float]], name: str, warnings: List[str]) -> np.ndarray:
    kept = np.sort(np.array([v for v in values if v is not None], dtype=np.float64))
    dropped = len(values) - len(kept)
    if dropped:
        message = f"group {name}: dropped {dropped} undefined values"
        logger.warning(message)
        warnings.append(message)
    return kept


def group_compare(
    group_a: Sequence[Optional[float]],
    group_b: Sequence[Optional[float]],
    alternative: Literal["two-sided", "less", "greater"] = "two-sided",
) -> GroupComparison:
    """
    Rank-sum comparison of two groups of measurement values.

    The effect size is the rank-biserial correlation 2 U_a / (n_a n_b) - 1:
    positive when A tends to exceed B.

    Raises:
        InsufficientDataError: If either group has no defined values
    """
    warnings: List[str] = []
    a = _defined(group_a, "a", warnings)
    b = _defined(group_b, "b", warnings)
    for name, values in (("a", a), ("b", b)):
        if len(values) == 0:
            raise InsufficientDataError(1, 0, f"defined values in group {name}")
        if len(values) < 3:
            message = f"group {name} has only {len(values)} values; statistics are unreliable"
            logger.warning(message)
            warnings.append(message)

    result = mannwhitneyu(a, b, alternative=alternative)
    u_a = float(result.statistic)
    p_value = float(result.pvalue)
    if not np.isfinite(p_value):
        p_value = 1.0
    return GroupComparison(
        group_a=_summary(a),
        group_b=_summary(b),
        u_statistic=u_a,
        p_value=p_value,
        alternative=alternative,
        effect_size=2.0 * u_a / (len(a) * len(b)) - 1.0,
        warnings=warnings,
    )


def direction_recovered(comparison: GroupComparison, expected: str, alpha: float = 0.01) -> bool:
    """Whether B moved away from A in the expected direction at level alpha (comparison run as A vs B)."""
    shifted = comparison.effect_size < 0 if expected == "increase" else comparison.effect_size > 0
    return shifted and comparison.p_value < alpha
