import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from epicodec.epi import (EpiError, EpiVolume, MultiViewFrameSet, StripGeometry, build_spatial_epis,
                          build_spatio_temporal, build_volumes, padded_width, reassemble, reassemble_all,
                          splice_views)
from epicodec.mvio import (LosslessReference, pack_volume, read_manifest, read_volumes, unpack_volume,
                           write_frames, write_volumes, yuv420_to_rgb)
from epicodec.synthetic import Layer, SyntheticSceneSpec, make_synthetic_dataset


def random_frames(k, m, n, t, seed=0, order=None):
    data = np.random.default_rng(seed).integers(0, 256, (k, t, n, m, 3), dtype=np.uint8)
    return MultiViewFrameSet(data, order)


def test_full_resolution_spatial_epi_shape():
    frames = MultiViewFrameSet(np.zeros((5, 1, 768, 1024, 3), np.uint8))
    epis = build_spatial_epis(frames, 0)
    assert len(epis) == 128 and epis[0].shape == (40, 768, 3)


def test_padding_to_multiple_of_three():
    assert padded_width(5) == 42 and padded_width(3) == 24
    g = StripGeometry(5, 64, 48, 3, tuple(range(5)))
    assert (g.pad_left, g.pad_right) == (1, 1) and g.volume_shape == (42, 48, 9)
    g3 = StripGeometry(3, 64, 48, 3, (0, 1, 2))
    assert (g3.pad_left, g3.pad_right) == (0, 0) and g3.volume_shape == (24, 48, 9)


def test_single_view_epis_tile_the_frame():
    frames = random_frames(1, 32, 6, 1)
    epis = build_spatial_epis(frames, 0)
    # EPI width is the strip's columns, axis 1 rows
    img = np.concatenate(epis, axis=0).transpose(1, 0, 2)
    np.testing.assert_allclose(img, frames.frames[0, 0] / 255.0, atol=1e-7)


def test_two_view_block_structure():
    data = np.zeros((2, 1, 4, 16, 3), np.uint8)
    data[1] = 255
    e = build_spatial_epis(MultiViewFrameSet(data), 0)[0]
    assert np.all(e[:8] == 0) and np.all(e[8:16] == 1)


def test_l1_volume_equals_spatial_epi():
    frames = random_frames(3, 16, 6, 2)
    spatial = build_spatial_epis(frames, 1)
    vol = build_spatio_temporal([spatial[1]], 1, 1, StripGeometry.for_frames(frames, 1))
    np.testing.assert_array_equal(vol.data, spatial[1])


def test_channels_are_time_ordered():
    frames = random_frames(3, 16, 6, 3)
    vols = build_volumes(frames, 3)
    for i in range(3):
        np.testing.assert_array_equal(vols[0].data[..., 3 * i:3 * i + 3], build_spatial_epis(frames, i)[0])


def test_two_views_pad_to_eighteen():
    vol = build_volumes(random_frames(2, 16, 6, 3), 3)[0]
    assert vol.data.shape == (18, 6, 9)
    assert np.all(vol.data[:1] == 0) and np.all(vol.data[17:] == 0)


@settings(max_examples=30, deadline=None)
@given(k=st.sampled_from([1, 2, 3, 5]), m=st.sampled_from([8, 16, 64]), n=st.integers(1, 12),
       windows=st.integers(1, 2), seed=st.integers(0, 2**16))
def test_round_trip_bit_exact(k, m, n, windows, seed):
    frames = random_frames(k, m, n, 3 * windows, seed)
    back = reassemble_all(build_volumes(frames, 3))
    np.testing.assert_array_equal(back.frames, frames.frames)


def test_partial_window_dropped():
    frames = random_frames(2, 16, 4, 7)
    vols = build_volumes(frames, 3)
    assert sorted({v.t for v in vols}) == [0, 1]
    assert reassemble_all(vols).T == 6


def test_padding_columns_are_zero_and_neutral():
    frames = random_frames(5, 16, 4, 3)
    vols = build_volumes(frames, 3)
    g = vols[0].geometry
    for v in vols:
        assert np.all(v.data[:g.pad_left] == 0) and np.all(v.data[g.pad_left + g.width:] == 0)
        v.data[:g.pad_left] = 1.0
        v.data[g.pad_left + g.width:] = 1.0
    np.testing.assert_array_equal(reassemble_all(vols).frames, frames.frames)


def test_zeroing_view_columns_blacks_out_that_view():
    frames = random_frames(3, 16, 4, 3)
    vols = build_volumes(frames, 3)
    g = vols[0].geometry
    pos = list(g.view_order).index(1)
    for v in vols:
        v.data[g.pad_left + 8 * pos:g.pad_left + 8 * pos + 8] = 0
    out = reassemble(vols)
    assert np.all(out[1] == 0)
    np.testing.assert_array_equal(out[[0, 2]], frames.frames[[0, 2], :3])


def test_view_order_permutes_column_blocks():
    frames = random_frames(3, 8, 4, 1, seed=3)
    a = build_spatial_epis(frames, 0)[0]
    permuted = MultiViewFrameSet(frames.frames, [2, 0, 1])
    b = build_spatial_epis(permuted, 0)[0]
    for pos, view in enumerate([2, 0, 1]):
        np.testing.assert_array_equal(b[8 * pos:8 * pos + 8], a[8 * view:8 * view + 8])
    np.testing.assert_array_equal(reassemble_all(build_volumes(
        MultiViewFrameSet(frames.frames.repeat(3, axis=1), [2, 0, 1]), 3)).frames, frames.frames.repeat(3, axis=1))


def test_missing_strip_rejected():
    vols = build_volumes(random_frames(2, 24, 4, 3), 3)
    with pytest.raises(EpiError, match="missing"):
        reassemble(vols[:-1])


@pytest.mark.parametrize("kwargs,match", [
    (dict(data=np.zeros((2, 1, 4, 12, 3), np.uint8)), "divisible"),
    (dict(data=np.zeros((2, 1, 4, 16, 3), np.uint8), view_order=[0, 0]), "permutation"),
    (dict(data=np.zeros((2, 1, 4, 16, 3), np.float32)), "uint8"),
])
def test_invalid_frame_sets_rejected(kwargs, match):
    with pytest.raises(EpiError, match=match):
        MultiViewFrameSet(kwargs.pop("data"), **kwargs)


def test_volume_shape_checked():
    g = StripGeometry(3, 16, 4, 3, (0, 1, 2))
    with pytest.raises(EpiError):
        EpiVolume(np.zeros((24, 4, 6), np.float32), 0, 0, g)


def test_time_index_checked():
    with pytest.raises(EpiError):
        build_spatial_epis(random_frames(1, 8, 2, 2), 5)


# -- splicing --

def test_splice_with_identical_reference_is_identity():
    frames = random_frames(3, 16, 4, 3)
    out = splice_views(frames, {0: frames.frames[0], 2: frames.frames[2]})
    np.testing.assert_array_equal(out.frames, frames.frames)


def test_splice_replaces_only_even_views():
    frames = random_frames(3, 16, 4, 3)
    gray = np.full(frames.frames[0].shape, 128, np.uint8)
    out = splice_views(frames, {0: gray, 2: gray})
    assert np.all(out.frames[[0, 2]] == 128)
    np.testing.assert_array_equal(out.frames[1], frames.frames[1])


def test_splice_rejects_wrong_views_or_shapes():
    frames = random_frames(3, 16, 4, 3)
    with pytest.raises(EpiError):
        splice_views(frames, {0: frames.frames[0]})
    with pytest.raises(EpiError):
        splice_views(frames, {0: frames.frames[0], 2: frames.frames[2][:, :2]})


# -- containers and ingestion --

def test_volume_container_round_trip(tmp_path):
    vols = build_volumes(random_frames(5, 16, 4, 6), 3)
    write_volumes(vols, tmp_path)
    back = read_volumes(tmp_path)
    assert len(back) == len(vols)
    by_key = {(v.t, v.j): v for v in back}
    for v in vols:
        b = by_key[(v.t, v.j)]
        assert b.geometry == v.geometry
        np.testing.assert_array_equal(b.data, v.data)


def test_volume_container_rejects_corruption():
    buf = pack_volume(build_volumes(random_frames(2, 8, 4, 3), 3)[0])
    with pytest.raises(EpiError):
        unpack_volume(b"XXXX" + buf[4:])
    with pytest.raises(EpiError):
        unpack_volume(buf[:-4])


def test_frame_manifest_round_trip(tmp_path):
    frames = random_frames(3, 16, 6, 4, order=[1, 0, 2])
    path = write_frames(frames, tmp_path)
    back = read_manifest(path)
    np.testing.assert_array_equal(back.frames, frames.frames)
    assert list(back.view_order) == [1, 0, 2]


def test_yuv_manifest_ingestion(tmp_path):
    n, m, t = 4, 8, 2
    rng = np.random.default_rng(5)
    raw = b""
    planes = []
    for _ in range(t):
        y = rng.integers(16, 236, (n, m), dtype=np.uint8)
        u = rng.integers(16, 241, (n // 2, m // 2), dtype=np.uint8)
        v = rng.integers(16, 241, (n // 2, m // 2), dtype=np.uint8)
        planes.append((y, u, v))
        raw += y.tobytes() + u.tobytes() + v.tobytes()
    (tmp_path / "v0.yuv").write_bytes(raw)
    manifest = {"K": 1, "M": m, "N": n, "frames": t, "view_order": [0],
                "views": [{"format": "yuv420p", "path": "v0.yuv"}]}
    (tmp_path / "manifest.json").write_text(json.dumps(manifest))
    frames = read_manifest(tmp_path / "manifest.json")
    np.testing.assert_array_equal(frames.frames[0, 1], yuv420_to_rgb(*planes[1]))


def test_yuv_gray_maps_to_gray():
    y = np.full((2, 2), 126, np.uint8)
    c = np.full((1, 1), 128, np.uint8)
    rgb = yuv420_to_rgb(y, c, c)
    assert np.all(rgb == rgb[..., :1])


def test_lossless_reference_is_exact():
    frames = random_frames(5, 16, 4, 3)
    ref = LosslessReference()
    buf = ref.encode(frames)
    out = ref.decode(buf)
    assert sorted(out) == [0, 2, 4]
    for v in out:
        np.testing.assert_array_equal(out[v], frames.frames[v])
    assert ref.bits(buf) == 8 * len(buf)


# -- synthetic scenes --

def test_degenerate_scene_is_static():
    spec = SyntheticSceneSpec(K=3, background_disparity=0, layers=[Layer(10, 10, 8, 8, disparity=0, velocity=0)])
    f = make_synthetic_dataset(spec).frames
    assert np.all(f == f[:1, :1])


def test_synthetic_is_deterministic():
    a = make_synthetic_dataset(SyntheticSceneSpec()).frames
    b = make_synthetic_dataset(SyntheticSceneSpec()).frames
    assert a.tobytes() == b.tobytes()


def test_layer_shifts_by_its_disparity_per_view():
    spec = SyntheticSceneSpec(K=3, M=64, N=16, frames=2, background_disparity=1,
                              layers=[Layer(x=20, y=2, width=10, height=12, disparity=2, velocity=1)])
    f = make_synthetic_dataset(spec).frames
    patch = f[0, 0, 2:14, 20:30]
    for v in range(3):
        for t in range(2):
            x0 = 20 + 2 * v + t
            np.testing.assert_array_equal(f[v, t, 2:14, x0:x0 + 10], patch)
    # background moves one pixel per view
    np.testing.assert_array_equal(f[1, 0, 14:, 41:60], f[0, 0, 14:, 40:59])


def test_out_of_frame_layer_rejected():
    with pytest.raises(ValueError):
        make_synthetic_dataset(SyntheticSceneSpec(K=5, layers=[Layer(50, 10, 12, 10, disparity=3)]))


def test_default_scene_gives_eight_epis():
    vols = build_volumes(make_synthetic_dataset(SyntheticSceneSpec()), 3)
    assert len(vols) == 8 and vols[0].data.shape == (24, 48, 9)
