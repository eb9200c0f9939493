import itertools

import numpy as np
import pytest
import torch
from skimage import draw

from phenldiff.middleware.exceptions import ConfigError, InsufficientDataError
from phenldiff.services.quantify import (
    channel_area,
    direction_recovered,
    group_compare,
    measure_images,
    measure_value,
    nuclear_cytoplasm_ratio,
    object_count,
    puncta_dispersion,
    rows_frame,
    threshold_value,
)


def _canvas(size: int = 32) -> np.ndarray:
    return -np.ones((3, size, size))


def _disks(centers, radius: float, channel: int = 0, size: int = 32) -> np.ndarray:
    image = _canvas(size)
    for center in centers:
        rr, cc = draw.disk(center, radius, shape=(size, size))
        image[channel, rr, cc] = 1.0
    return image


def _rank_sum_p_greater(a, b) -> float:
    """Exact P(U >= u_obs) by enumerating every relabelling of the pooled values."""
    pooled = list(a) + list(b)

    def u_stat(xs, ys):
        return sum((x > y) + 0.5 * (x == y) for x in xs for y in ys)

    observed = u_stat(a, b)
    hits = total = 0
    for chosen in itertools.combinations(range(len(pooled)), len(a)):
        xs = [pooled[i] for i in chosen]
        ys = [pooled[i] for i in range(len(pooled)) if i not in chosen]
        hits += u_stat(xs, ys) >= observed - 1e-12
        total += 1
    return hits / total


def test_area_fraction_of_a_disk() -> None:
    image = _disks([(16, 16)], 6)
    rr, _ = draw.disk((16, 16), 6, shape=(32, 32))
    assert channel_area(image, 0) == pytest.approx(len(rr) / 32**2)
    assert channel_area(image, 1) == 0.0


def test_constant_channel_threshold() -> None:
    assert threshold_value(np.zeros((4, 4))) == 0.0
    assert threshold_value(np.ones((4, 4)), "fixed", 0.3) == 0.3
    with pytest.raises(ConfigError):
        threshold_value(np.ones((4, 4)), "triangle")  # type: ignore[arg-type]


def test_object_count() -> None:
    image = _disks([(6, 6), (6, 24), (24, 15)], 3)
    assert object_count(image, 0) == 3
    image[0, 28, 28] = 1.0
    assert object_count(image, 0) == 4
    assert object_count(image, 0, min_size=2) == 3
    with pytest.raises(ConfigError):
        object_count(image, 0, min_size=0)


def test_diagonal_pixels_form_one_object() -> None:
    image = _canvas()
    image[0, 10, 10] = image[0, 11, 11] = 1.0
    assert object_count(image, 0) == 1


def test_nuclear_cytoplasm_ratio() -> None:
    image = -np.ones((3, 16, 16))
    image[2, 4:12, 4:12] = 1.0
    image[1] = 0.0
    image[1, 4:12, 4:12] = 1.0
    # unit marker: 1.0 on 64 nucleus pixels, 0.5 on the other 192
    inside, outside = 64.0, 96.0
    expected = inside / (outside + 1e-6 * (inside + outside))
    assert nuclear_cytoplasm_ratio(image) == pytest.approx(expected)


def test_nuclear_ratio_undefined_without_marker() -> None:
    image = -np.ones((3, 16, 16))
    image[2, 4:12, 4:12] = 1.0
    assert measure_value(image, "nuclear_cytoplasm_ratio", channel=1) is None


def test_puncta_dispersion() -> None:
    image = _canvas(40)
    for y, x in [(10, 10), (10, 20), (10, 30)]:
        image[0, y, x] = 1.0
    assert puncta_dispersion(image, 0) == pytest.approx(40 / 3)

    single = _canvas(40)
    single[0, 5, 5] = 1.0
    assert puncta_dispersion(single, 0) is None


def test_channel_must_exist() -> None:
    with pytest.raises(ConfigError):
        channel_area(_canvas(), 3)


def test_measure_images_sorted_by_id() -> None:
    images = [_disks([(16, 16)], r) for r in (3, 5, 7)]
    rows = measure_images(images, ["x/2", "x/0", "x/1"], "x", "area_fraction", channel=0)
    assert [r.image_id for r in rows] == ["x/0", "x/1", "x/2"]
    assert rows[2].value < rows[0].value
    frame = rows_frame(rows)
    assert list(frame["image_id"]) == ["x/0", "x/1", "x/2"]
    assert frame["defined"].all()


def test_measurements_accept_tensors() -> None:
    image = _disks([(16, 16)], 6)
    assert channel_area(torch.from_numpy(image).float(), 0) == pytest.approx(channel_area(image, 0))


def test_group_compare_separated_groups() -> None:
    result = group_compare([5.0, 6.0, 7.0, 8.0], [1.0, 2.0, 3.0, 4.0], alternative="greater")
    assert result.u_statistic == 16.0
    assert result.p_value == pytest.approx(1 / 70)
    assert result.effect_size == pytest.approx(1.0)
    assert result.group_a.median == pytest.approx(6.5)
    assert result.group_b.iqr == pytest.approx(1.5)


def test_group_compare_against_permutation() -> None:
    a = [1.5, 3.2, 0.4, 2.9]
    b = [0.1, 2.0, 1.0, 0.7, 3.0]
    result = group_compare(a, b, alternative="greater")
    assert result.p_value == pytest.approx(_rank_sum_p_greater(a, b))
    u = sum(x > y for x in a for y in b)
    assert result.u_statistic == u
    assert result.effect_size == pytest.approx(2 * u / 20 - 1)


def test_group_compare_drops_undefined_values() -> None:
    result = group_compare([1.0, None, 2.0, 3.0], [4.0, 5.0, 6.0])
    assert result.group_a.n == 3
    assert any("dropped 1" in w for w in result.warnings)

    small = group_compare([1.0, 2.0], [3.0, 4.0, 5.0])
    assert any("only 2 values" in w for w in small.warnings)

    with pytest.raises(InsufficientDataError):
        group_compare([None, None], [1.0, 2.0])


def test_direction_recovered() -> None:
    increase = group_compare([1.0, 2.0, 3.0, 4.0, 5.0, 6.0], [11.0, 12.0, 13.0, 14.0, 15.0, 16.0])
    assert direction_recovered(increase, "increase")
    assert not direction_recovered(increase, "decrease")
    flat = group_compare([1.0, 2.0, 3.0], [1.5, 2.5, 3.5])
    assert not direction_recovered(flat, "increase")


def test_area_grows_as_fixed_threshold_drops() -> None:
    image = np.random.default_rng(4).uniform(-1, 1, size=(3, 24, 24))
    areas = [channel_area(image, 0, "fixed", t) for t in np.linspace(1.0, 0.0, 21)]
    assert all(later >= earlier for earlier, later in zip(areas, areas[1:]))
    assert areas[0] == 0.0 and areas[-1] == 1.0


def test_object_count_ignores_whole_pixel_shifts() -> None:
    image = _disks([(8, 14), (16, 22)], 3)
    shifted = np.roll(image, shift=(7, -5), axis=(1, 2))
    assert (shifted[0] > 0).sum() == (image[0] > 0).sum()
    assert object_count(image, 0) == object_count(shifted, 0) == 2


def test_group_compare_is_symmetric() -> None:
    rng = np.random.default_rng(5)
    a = list(rng.normal(0.0, 1.0, size=30))
    b = list(rng.normal(0.8, 1.0, size=25))
    forward = group_compare(a, b)
    backward = group_compare(b, a)
    assert forward.p_value == pytest.approx(backward.p_value, rel=1e-12)
    assert forward.effect_size == pytest.approx(-backward.effect_size, abs=1e-12)


def test_nuclear_ratio_with_uniform_marker() -> None:
    image = _disks([(16, 16)], 8, channel=2)
    image[1] = 0.0
    nucleus_share = channel_area(image, 2)
    # equal marker everywhere: the ratio reduces to nucleus area over the rest
    expected = nucleus_share / (1 - nucleus_share + 1e-6)
    assert nuclear_cytoplasm_ratio(image) == pytest.approx(expected, rel=1e-9)
