import itertools

import numpy as np
import pytest

from vtar import synthgen
from vtar.errors import FormatError
from vtar.synthgen import DataConfig, generate_dataset


@pytest.fixture(scope="module")
def small():
    return generate_dataset(num_classes=8, samples_per_class=32, noise_sigma=0.5, seed=7)


def test_same_seed_gives_bit_identical_datasets(small):
    again = generate_dataset(num_classes=8, samples_per_class=32, noise_sigma=0.5, seed=7)
    assert small[0] == again[0] and small[1] == again[1]


def test_different_seed_changes_frames(small):
    other = generate_dataset(num_classes=8, samples_per_class=32, noise_sigma=0.5, seed=8)
    assert not np.array_equal(small[0][0].frames, other[0][0].frames)


def test_split_is_80_20_and_classes_balanced(small):
    train, test = small
    assert len(train) + len(test) == 8 * 32
    for c in range(8):
        assert sum(s.label == c for s in train) + sum(s.label == c for s in test) == 32
    assert len(test) == 8 * round(0.2 * 32)


def test_script_invariants(small):
    for s in small[0] + small[1]:
        t, d = s.frames.shape
        assert d == 32 and 32 <= t <= 256
        assert s.script.total_duration == t
        assert all(dur >= 4 for _, dur in s.script.segments)
        assert all(0 <= g < s.script.num_concepts for g, _ in s.script.segments)
        assert np.all(np.isfinite(s.frames))


def test_zero_noise_samples_with_same_jitter_are_identical():
    # jitter 0 makes every sample of a class share its durations
    cfg = DataConfig(num_classes=4, samples_per_class=16, noise_sigma=0.0, jitter=0)
    train, test = generate_dataset(seed=3, config=cfg)
    groups = {}
    for s in train + test:
        groups.setdefault((s.label, s.script.segments), []).append(s.frames)
    assert len(groups) == 4
    for g in groups.values():
        for a, b in itertools.combinations(g, 2):
            assert np.array_equal(a, b)


def test_classes_differ_only_in_order_and_timing(small):
    by_class = {}
    for s in small[0]:
        by_class.setdefault(s.label, s.script)
    concept_sets = {tuple(sorted(g for g, _ in sc.segments)) for sc in by_class.values()}
    orders = {tuple(g for g, _ in sc.segments) for sc in by_class.values()}
    assert len(orders) == 8
    assert len(concept_sets) <= 8


def test_concept_means_respect_separation():
    cfg = DataConfig(noise_sigma=1.0)
    means = synthgen.concept_means(cfg, np.random.default_rng(0))
    d = np.sqrt(((means[:, None] - means[None]) ** 2).sum(-1))
    assert d[~np.eye(len(means), dtype=bool)].min() >= 4 * cfg.noise_sigma


def test_unsatisfiable_sigma_names_the_bound():
    bound = synthgen.separation_bound(DataConfig())
    with pytest.raises(ValueError, match=f"{bound:.4g}"):
        generate_dataset(noise_sigma=bound * 1.01, seed=0)


@pytest.mark.parametrize("kwargs", [dict(num_classes=1), dict(num_classes=33), dict(samples_per_class=7),
                                    dict(noise_sigma=-0.1)])
def test_preconditions_rejected(kwargs):
    with pytest.raises(ValueError):
        generate_dataset(seed=0, **kwargs)


def test_centroid_oracle_difficulty_dial():
    easy = generate_dataset(num_classes=8, samples_per_class=32, noise_sigma=0.1, seed=0)
    hard = generate_dataset(num_classes=8, samples_per_class=32, noise_sigma=4.0, seed=0)
    assert synthgen.centroid_accuracy(*easy) >= 0.99
    assert synthgen.centroid_accuracy(*hard) <= 0.60


def test_change_points_recover_boundaries_at_zero_noise():
    train, _ = generate_dataset(num_classes=8, samples_per_class=8, noise_sigma=0.0, seed=2)
    for s in train:
        assert synthgen.detect_change_points(s.frames) == s.script.boundaries


# ------------------------------------------------------------------ file format


def test_round_trip_is_bit_exact(tmp_path, small):
    path = tmp_path / "d.vtar"
    synthgen.write_dataset(small[1], path)
    back = synthgen.read_dataset(path)
    assert back == small[1]
    assert all(a.frames.tobytes() == b.frames.tobytes() for a, b in zip(back, small[1]))


def test_empty_list_is_a_valid_file(tmp_path):
    path = tmp_path / "e.vtar"
    synthgen.write_dataset([], path)
    assert synthgen.read_dataset(path) == []


def test_truncated_file_reports_lengths(tmp_path, small):
    buf = synthgen.encode_dataset(small[1][:2])
    cut = buf[:-37]
    with pytest.raises(FormatError) as info:
        synthgen.decode_dataset(cut)
    msg = str(info.value)
    assert "expected" in msg and "got" in msg
    assert info.value.offset > 0


def test_bad_magic_rejected_at_offset_zero():
    with pytest.raises(FormatError) as info:
        synthgen.decode_dataset(b"NOPE!" + bytes(8))
    assert info.value.offset == 0


def test_trailing_bytes_rejected(small):
    buf = synthgen.encode_dataset(small[1][:1]) + b"\x00"
    with pytest.raises(FormatError, match="trailing"):
        synthgen.decode_dataset(buf)
