import json

import numpy as np
import pytest

from glarekit.errors import SpecError
from glarekit.gsf import rasterize_kernel, simulate_glare
from glarekit.radiance import Rect
from glarekit.synth import (
    SceneObject, SceneSpec, Source, degrade, disk_mask, gaussian_noise, make_exposure_stack,
    make_scene, rig_scene, tunnel_spec,
)

from conftest import P_STAR


def test_rig_scene_geometry():
    s = rig_scene(16, 16, 7.0, diameter_px=2.0)
    m = disk_mask(16, 16, 8, 8, 1.0)
    assert s.sum() == pytest.approx(m.sum() * 7.0)
    assert np.all(s[~m] == 0)


def test_empty_spec_is_background():
    np.testing.assert_array_equal(make_scene(SceneSpec(5, 6, background=0.25)), np.full((5, 6), 0.25))


def test_scene_features():
    spec = SceneSpec(20, 20, background=0.1, texture=0.5, seed=3,
                     dark_patches=[Rect(0, 0, 4, 4)],
                     sources=[Source(10, 10, 2, 50.0)],
                     objects=[SceneObject(Rect(12, 14, 5, 4), "car", 0.4)])
    s = make_scene(spec)
    assert np.all(s[0:4, 0:4] == 0)
    assert np.all(s[disk_mask(20, 20, 10, 10, 2)] == 50.0)
    assert np.all(s[14:18, 12:17] == 0.4)
    np.testing.assert_array_equal(s, make_scene(spec))
    assert make_scene(SceneSpec(4, 4, channels=3)).shape == (4, 4, 3)


def test_scene_errors():
    with pytest.raises(SpecError):
        make_scene(SceneSpec(10, 10, dark_patches=[Rect(0, 0, 5, 5)], sources=[Source(2, 2, 1, 5.0)]))
    with pytest.raises(SpecError):
        make_scene(SceneSpec(10, 10, sources=[Source(20, 2, 1, 5.0)]))
    with pytest.raises(SpecError):
        make_scene(SceneSpec(0, 10))
    with pytest.raises(SpecError):
        SceneSpec.from_dict({"height": 4, "width": 4, "colour": "red"})


def test_spec_json_round_trip(tmp_path):
    spec = tunnel_spec(5, size=64)
    p = tmp_path / "s.json"
    p.write_text(json.dumps(spec.to_dict()))
    again = SceneSpec.from_json(p)
    assert again == spec
    np.testing.assert_array_equal(make_scene(again), make_scene(spec))


def test_gaussian_noise_is_reproducible_and_standard():
    a = gaussian_noise((200, 300), 7)
    np.testing.assert_array_equal(a, gaussian_noise((200, 300), 7))
    assert abs(a.mean()) < 0.01 and abs(a.std() - 1) < 0.01
    assert not np.array_equal(a, gaussian_noise((200, 300), 8))
    assert gaussian_noise((3,), 0).shape == (3,)


def test_degrade_without_clipping_is_glare(rng):
    scene = rng.random((16, 16))
    out, rec = degrade(scene, P_STAR)
    np.testing.assert_array_equal(out, simulate_glare(scene, rasterize_kernel(P_STAR, 16, 16)))
    assert not rec.clip_mask.any()


def test_degrade_clip_mask():
    scene = make_scene(SceneSpec(32, 32, sources=[Source(16, 16, 2, 100.0)]))
    pre = simulate_glare(scene, rasterize_kernel(P_STAR, 32, 32))
    out, rec = degrade(scene, P_STAR, ceiling=1.0)
    np.testing.assert_array_equal(rec.clip_mask, pre >= 1.0)
    assert out.max() == 1.0
    with pytest.raises(SpecError):
        degrade(scene, P_STAR, ceiling=0.0)


def test_record_replays_bit_for_bit():
    scene = make_scene(tunnel_spec(2, size=32, channels=3))
    out, rec = degrade(scene, P_STAR, ceiling=1.0, noise_sigma=0.01, seed=9)
    np.testing.assert_array_equal(rec.replay(), out)
    assert rec.summary()["clipped_pixels"] == int(rec.clip_mask.sum())
    assert rec.clip_mask.shape == (32, 32)


def test_exposure_stack_from_scene():
    scene = np.full((4, 4), 0.3)
    st = make_exposure_stack(scene, [1.0], 1.0)
    np.testing.assert_array_equal(st.frames[0].image, scene)
    st = make_exposure_stack(scene, [1.0, 2.0], 1.0)
    np.testing.assert_allclose(st.frames[1].image, 2 * st.frames[0].image)
    with pytest.raises(SpecError):
        make_exposure_stack(scene, [4.0, 5.0], 1.0)
    with pytest.raises(SpecError):
        make_exposure_stack(scene, [2.0, 1.0], 1.0)


def test_tunnel_spec_deterministic():
    assert tunnel_spec(11) == tunnel_spec(11)
    assert tunnel_spec(11) != tunnel_spec(12)
