import itertools
import json

import numpy as np
import pytest
from scipy.stats import mannwhitneyu

from studmerge import synth
from studmerge.synth import ANOMALIES, SiteProfile


def clean_profile(**kw):
    return SiteProfile(1, gain=1.0, noise_std=0.0, blur_sigma=0.0, **kw)


def voxel_oracle(profile, seed, t, y, x):
    """Point-wise ellipse model, replaying the generator's documented draw order."""
    rng = np.random.default_rng(seed)
    cy = profile.height / 2 + rng.uniform(-2, 2)
    cx = profile.width / 2 + rng.uniform(-2, 2)
    freq = rng.uniform(*profile.freq_range)
    phase0 = rng.uniform(0, 2 * np.pi)
    s = 1 + profile.pulse * np.sin(phase0 + 2 * np.pi * freq * t / profile.frames)
    a = 0.30 * profile.height * profile.heart_scale * s
    b = 0.22 * profile.width * profile.heart_scale * s
    dy, dx = y + 0.5 - cy, x + 0.5 - cx
    if (dy / a) ** 2 + (dx / b) ** 2 > 1:
        return profile.background, (cy, cx, a, b)
    for side in (-1, 1):
        if (dy / (0.6 * a)) ** 2 + ((dx - side * 0.5 * b) / (0.3 * b)) ** 2 <= 1:
            return profile.chamber, (cy, cx, a, b)
    return profile.wall, (cy, cx, a, b)


def test_same_seed_same_clip():
    p = synth.default_profiles()[1]
    a, b = synth.generate_clip(p, None, 5), synth.generate_clip(p, None, 5)
    assert a.dtype == np.float32 and a.shape == (48, 64, 64, 1)
    assert a.tobytes() == b.tobytes()
    assert a.tobytes() != synth.generate_clip(p, None, 6).tobytes()


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_closed_form_voxels(seed):
    p = clean_profile()
    clip = synth.generate_clip(p, None, seed)[..., 0]

    def geometry(t):
        return voxel_oracle(p, seed, t, 0, 0)[1]

    cy, cx, a, b = geometry(7)
    chamber = (7, int(cy), int(cx - 0.5 * b))
    cy, cx, a, b = geometry(11)
    wall = (11, int(cy + 0.8 * a), int(cx))
    for (t, y, x), kind in zip([(3, 0, 0), chamber, wall], [p.background, p.chamber, p.wall]):
        value, _ = voxel_oracle(p, seed, t, y, x)
        assert value == kind
        assert clip[t, y, x] == pytest.approx(value, abs=1e-6)


def test_gain_scales_clean_clip():
    c1 = synth.generate_clip(clean_profile(), None, 3)
    c2 = synth.generate_clip(synth.perturb_profile(clean_profile(), gain=0.5), None, 3)
    np.testing.assert_allclose(c2, 0.5 * c1, atol=1e-7)


def test_frozen_has_less_motion():
    p = synth.default_profiles()[0]
    for i in range(100):
        healthy = synth.motion_energy(synth.generate_clip(p, None, i))
        frozen = synth.motion_energy(synth.generate_clip(p, "frozen", i))
        assert healthy > frozen


def test_unknown_anomaly_and_invalid_profiles():
    with pytest.raises(ValueError):
        synth.generate_clip(clean_profile(), "melted", 0)
    with pytest.raises(ValueError):
        SiteProfile(1, gain=10.0)
    with pytest.raises(ValueError):
        SiteProfile(1, freq_range=(3.0, 2.0))


def test_default_profiles_distinct():
    profs = synth.default_profiles()
    assert [p.site_id for p in profs] == [1, 2, 3, 4, 5]
    for p, q in itertools.combinations(profs, 2):
        assert {**p.to_dict(), "site_id": 0} != {**q.to_dict(), "site_id": 0}


def test_anomaly_counts():
    p = clean_profile()
    m = synth.site_manifest(p, 3, 20, 0.3, 0)
    assert sum(c["label"] for c in m["clips"]) == 6
    assert sum(c["split"] == "train" for c in m["clips"]) == 3
    assert not any(c["label"] for c in synth.site_manifest(p, 2, 10, 0.0, 0)["clips"])
    assert all(c["anomaly"] in ANOMALIES for c in m["clips"] if c["label"])
    assert not any(c["label"] for c in m["clips"] if c["split"] == "train")
    with pytest.raises(ValueError):
        synth.site_manifest(p, 1, 1, 1.5, 0)


def test_manifest_regenerates_bit_exact():
    ds = synth.generate_site(synth.default_profiles()[2], 3, 5, 0.4, 9)
    again = synth.from_manifest(json.loads(json.dumps(ds.manifest)))
    for x, y in zip(ds.train + ds.test, again.train + again.test):
        assert x.tobytes() == y.tobytes()
    assert again.test_labels == ds.test_labels


def test_site_directory_roundtrip(tmp_path):
    ds = synth.generate_site(synth.default_profiles()[0], 2, 3, 0.34, 1)
    synth.save_site(ds, tmp_path / "site1")
    back = synth.load_site(tmp_path / "site1")
    assert back.profile == ds.profile and back.test_labels == ds.test_labels
    for x, y in zip(ds.train + ds.test, back.train + back.test):
        assert x.tobytes() == y.tobytes()


def test_clip_header_layout(tmp_path):
    clip = np.arange(2 * 3 * 4, dtype=np.float32).reshape(2, 3, 4, 1)
    synth.write_clip(clip, tmp_path / "c.clip")
    blob = (tmp_path / "c.clip").read_bytes()
    assert blob[:8] == b"STUDCLIP" and blob[8] == 1 and blob[9] == 4
    assert np.frombuffer(blob[10:26], "<u4").tolist() == [2, 3, 4, 1]
    np.testing.assert_array_equal(np.frombuffer(blob[26:], "<f4"), clip.ravel())
    (tmp_path / "bad.clip").write_bytes(blob[:-4])
    with pytest.raises(ValueError):
        synth.read_clip(tmp_path / "bad.clip")


def test_user_directory_without_profile(tmp_path):
    rng = np.random.default_rng(0)
    for name in ("a.clip", "b.clip"):
        synth.write_clip(rng.random((4, 8, 8, 1)), tmp_path / name)
    manifest = {"site_id": 7, "clips": [{"file": "a.clip", "split": "train", "label": False},
                                        {"file": "b.clip", "split": "test", "label": True}]}
    (tmp_path / "manifest.json").write_text(json.dumps(manifest))
    ds = synth.load_site(tmp_path)
    assert ds.site_id == 7 and len(ds.train) == 1 and ds.test_labels == [True]
    manifest["clips"][0]["label"] = True
    (tmp_path / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(ValueError):
        synth.load_site(tmp_path)


@pytest.mark.parametrize("site", [1, 2, 3, 4, 5])
def test_oracle_statistic_separates_anomalies(site):
    p = synth.default_profiles()[site - 1]
    ds = synth.generate_site(p, 30, 40, 0.5, 0)
    ref = np.array([synth.oracle_statistics(c) for c in ds.train])
    mu, sd = ref.mean(0), ref.std(0) + 1e-12
    score = np.array([np.abs((synth.oracle_statistics(c) - mu) / sd).max() for c in ds.test])
    y = np.array(ds.test_labels)
    auc = mannwhitneyu(score[y], score[~y]).statistic / (y.sum() * (~y).sum())
    assert auc > 0.9


def test_site_brightness_differs():
    stats = {}
    for p in synth.default_profiles():
        means = [c.mean() for c in synth.generate_site(p, 30, 0, 0.0, 0).train]
        stats[p.site_id] = (np.mean(means), np.std(means))
    for a, b in itertools.combinations(stats, 2):
        gap = abs(stats[a][0] - stats[b][0])
        assert gap > 3 * max(stats[a][1], stats[b][1])
