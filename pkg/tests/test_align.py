import numpy as np
import pytest

from latentfusion import autodiff as ad
from latentfusion.align import DepthMlpParams, align_image_features, depth_embedding
from latentfusion.autodiff import Tensor, finite_diff_check
from latentfusion.errors import ContractError
from latentfusion.geometry import Calibration, FeatureMap, bilinear_sample, project_points
from latentfusion.pipeline import kitti_like_calibration
from latentfusion.voxel import LinearParams, VoxelConfig, VoxelSet

CFG = VoxelConfig()
CALIB = kitti_like_calibration()


def depth_params(rng, c, hidden=None):
    return DepthMlpParams.init(rng, c, hidden)


def front_voxels(rng, n=10, c=3, stage=1):
    stride = 2 ** (stage - 1)
    pts = np.column_stack([rng.uniform(6, 40, n), rng.uniform(-4, 4, n), rng.uniform(-1.5, 0.5, n)])
    idx = np.floor((pts - CFG.range_min) / (np.array(CFG.voxel_size) * stride)).astype(np.int64)
    return VoxelSet(stage, stride, idx, CFG.centers(idx, stride), Tensor(rng.normal(size=(n, c))), CFG)


def ramp_map(c, stride, level, hw=(370, 1224)):
    hj, wj = -(-hw[0] // stride), -(-hw[1] // stride)
    v, u = np.meshgrid(np.arange(hj) * stride, np.arange(wj) * stride, indexing="ij")
    vals = np.stack([(k + 1) * u / hw[1] + 0.5 * v / hw[0] for k in range(c)], axis=-1)
    return FeatureMap(Tensor(vals), stride, level)


def zero_params(c, hidden=4):
    z = lambda *s: Tensor(np.zeros(s))  # noqa: E731
    return DepthMlpParams(LinearParams(z(3, hidden), z(hidden)), LinearParams(z(hidden, c), z(c)))


def saturated_params(c, hidden=4):
    z = lambda *s: Tensor(np.zeros(s))  # noqa: E731
    return DepthMlpParams(LinearParams(z(3, hidden), z(hidden)), LinearParams(z(hidden, c), Tensor(np.full(c, 800.0))))


def test_zero_params_give_half():
    d = depth_embedding(np.random.default_rng(0).normal(size=(5, 3)), zero_params(6)).data
    assert np.array_equal(d, np.full((5, 6), 0.5))


def test_identical_centers_identical_rows(rng):
    c = np.repeat(rng.normal(size=(1, 3)), 4, axis=0)
    d = depth_embedding(c, depth_params(rng, 5)).data
    assert np.all(d == d[0])


def test_depth_embedding_composition_oracle(rng):
    p = depth_params(rng, 5, hidden=7)
    centers = rng.uniform([0, -40, -3], [70, 40, 1], size=(20, 3))
    h = np.tanh(centers @ p.fc1.weight.data + p.fc1.bias.data)
    want = 1 / (1 + np.exp(-(h @ p.fc2.weight.data + p.fc2.bias.data)))
    assert np.abs(depth_embedding(centers, p).data - want).max() < 1e-12


def test_depth_embedding_open_interval(rng):
    centers = rng.uniform([0, -40, -3], [70.4, 40, 1], size=(500, 3))
    d = depth_embedding(centers, depth_params(rng, 8)).data
    assert np.all((d > 0) & (d < 1))


def test_all_invalid_gives_zero(rng):
    v = front_voxels(rng)
    behind = VoxelSet(1, 1, v.indices, v.centers * [-1, 1, 1], v.features, CFG)
    out = align_image_features(behind, CALIB, ramp_map(3, 4, 1), depth_params(rng, 3))
    assert not out.valid.any()
    assert not out.values.data.any()


def test_saturated_gate_returns_raw_samples(rng):
    v = front_voxels(rng)
    fmap = ramp_map(3, 4, 1)
    gated = align_image_features(v, CALIB, fmap, saturated_params(3)).values.data
    raw = bilinear_sample(fmap, project_points(v.centers, CALIB)).data
    assert np.array_equal(gated, raw)
    assert np.array_equal(align_image_features(v, CALIB, fmap, None).values.data, raw)


def test_step_by_step_oracle_chain(rng):
    angle = rng.uniform(-0.05, 0.05)
    rot = np.array([[np.cos(angle), 0, np.sin(angle)], [0, 1, 0], [-np.sin(angle), 0, np.cos(angle)]])
    tr = np.array([[0.0, -1, 0, 0.01], [0, 0, -1, -0.05], [1, 0, 0, -0.2]])
    calib = Calibration.from_kitti(CALIB.cam_projection, rot, tr)
    v = front_voxels(rng, 10, 4)
    fmap = ramp_map(4, 8, 1)
    p = depth_params(rng, 4)
    out = align_image_features(v, calib, fmap, p)

    h = np.c_[v.centers, np.ones(10)] @ calib.matrix.T
    uv = h[:, :2] / h[:, 2:]
    hh, ww = calib.image_size
    valid = (h[:, 2] > 0) & (uv[:, 0] >= 0) & (uv[:, 0] < ww) & (uv[:, 1] >= 0) & (uv[:, 1] < hh)
    vals = fmap.values.data
    sampled = np.zeros((10, 4))
    for m in np.flatnonzero(valid):
        x, y = uv[m] / 8
        x0, y0 = int(x), int(y)
        ax, ay = x - x0, y - y0
        sampled[m] = (
            (1 - ax) * (1 - ay) * vals[y0, x0] + ax * (1 - ay) * vals[y0, x0 + 1]
            + (1 - ax) * ay * vals[y0 + 1, x0] + ax * ay * vals[y0 + 1, x0 + 1]
        )
    gate = 1 / (1 + np.exp(-(np.tanh(v.centers @ p.fc1.weight.data + p.fc1.bias.data) @ p.fc2.weight.data + p.fc2.bias.data)))
    assert valid.any()
    assert np.array_equal(out.valid, valid)
    assert np.abs(out.values.data - gate * sampled).max() < 1e-12


def test_stage_level_mismatch(rng):
    v = front_voxels(rng, stage=2)
    with pytest.raises(ContractError, match="stage 2 voxels paired with level 3"):
        align_image_features(v, CALIB, ramp_map(3, 16, 3), depth_params(rng, 3))


def test_zero_sample_zeroes_output(rng):
    v = front_voxels(rng)
    fmap = FeatureMap(Tensor(np.zeros((93, 306, 3))), 4, 1)
    assert not align_image_features(v, CALIB, fmap, depth_params(rng, 3)).values.data.any()


def test_rows_follow_voxel_order(rng):
    v = front_voxels(rng, 12)
    perm = rng.permutation(12)
    shuffled = VoxelSet(1, 1, v.indices[perm], v.centers[perm], v.features, CFG)
    p = depth_params(rng, 3)
    a = align_image_features(v, CALIB, ramp_map(3, 4, 1), p).values.data
    b = align_image_features(shuffled, CALIB, ramp_map(3, 4, 1), p).values.data
    assert np.array_equal(a[perm], b)


def test_channel_adapter(rng):
    v = front_voxels(rng)
    adapter = rng.normal(size=(5, 3))
    out = align_image_features(v, CALIB, ramp_map(5, 32, 4), None, enforce_scale_alignment=False, channel_adapter=Tensor(adapter))
    raw = bilinear_sample(ramp_map(5, 32, 4), project_points(v.centers, CALIB)).data
    assert np.allclose(out.values.data, raw @ adapter, rtol=0, atol=1e-12)


def test_gate_width_must_match(rng):
    with pytest.raises(ContractError, match="width"):
        align_image_features(front_voxels(rng), CALIB, ramp_map(3, 4, 1), depth_params(rng, 5))


def test_gradient_through_project_sample_gate(rng):
    v = front_voxels(rng, 10, 3)
    fmap = ramp_map(3, 4, 1)
    p = depth_params(rng, 3)
    probe = Tensor(rng.normal(size=(10, 3)))

    def loss(values, w1, b1, w2, b2):
        params = DepthMlpParams(LinearParams(w1, b1), LinearParams(w2, b2))
        out = align_image_features(v, CALIB, fmap.with_values(values), params)
        return ad.total(ad.mul(out.values, probe))

    inputs = [fmap.values, p.fc1.weight, p.fc1.bias, p.fc2.weight, p.fc2.bias]
    err_params = finite_diff_check(lambda *t: loss(fmap.values, *t), inputs[1:], 1e-5)
    err_map = finite_diff_check(lambda m: loss(m, *inputs[1:]), inputs[:1], 1e-5, max_coords=200)
    assert err_params < 1e-4
    assert err_map < 1e-4


def test_gradient_wrt_centers(rng):
    p = depth_params(rng, 4)
    probe = Tensor(rng.normal(size=(6, 4)))
    fn = lambda c: ad.total(ad.mul(depth_embedding(c, p), probe))  # noqa: E731
    assert finite_diff_check(fn, [Tensor(rng.uniform(0, 40, size=(6, 3)))], 1e-5) < 1e-7
