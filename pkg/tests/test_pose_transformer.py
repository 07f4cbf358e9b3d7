import numpy as np
import pytest
import torch

from binopose.pose_transformer import (PoseTransformer, PretrainConfig, PTConfig, constant_pad_error,
                                       denormalize_pose, iterative_mask_recover, joint_confidence, mask_count,
                                       masked_recovery_error, normalize_pose, pad_masked, pretrain_pt,
                                       random_masks, refine_pose, scheduled_lr, top_k_confident,
                                       write_pretrain_log)
from binopose.synth import J, PELVIS, SkeletonModel, sample_pose

SMALL = PTConfig(dim=16, depth=2, heads=8)


def _poses(n, seed=0):
    rng = np.random.default_rng(seed)
    sk = SkeletonModel()
    return np.stack([sample_pose(sk, rng) for _ in range(n)])


def test_forward_shapes_and_attention_rows():
    m = PoseTransformer(SMALL).double()
    x = torch.randn(3, J, 3, dtype=torch.float64)
    out, maps = m(x, attention="all")
    assert out.shape == (3, J, 3) and len(maps) == 2
    for a in maps:
        assert a.shape == (3, 8, J, J)
        torch.testing.assert_close(a.sum(-1), torch.ones(3, 8, J, dtype=torch.float64), atol=1e-12, rtol=0)
    _, last = m(x, attention="last")
    torch.testing.assert_close(last[0], maps[-1])
    assert m(x)[1] is None


def test_attention_paths_agree():
    m = PoseTransformer(SMALL).double()
    x = torch.randn(2, J, 3, dtype=torch.float64)
    torch.testing.assert_close(m(x)[0], m(x, attention="all")[0], atol=1e-12, rtol=0)


def test_single_pose_input_and_batch_permutation():
    m = PoseTransformer(SMALL).double()
    x = torch.randn(4, J, 3, dtype=torch.float64)
    out = m(x)[0]
    torch.testing.assert_close(m(x[2])[0], out[2], atol=1e-12, rtol=0)
    perm = torch.tensor([3, 0, 2, 1])
    torch.testing.assert_close(m(x[perm])[0], out[perm], atol=1e-12, rtol=0)


def test_rejects_bad_input():
    m = PoseTransformer(SMALL)
    x = torch.zeros(1, J, 3)
    x[0, 3, 1] = float("nan")
    with pytest.raises(ValueError, match="non-finite"):
        m(x)
    with pytest.raises(ValueError):
        m(torch.zeros(1, J - 1, 3))
    with pytest.raises(ValueError):
        m(torch.zeros(1, J, 3), attention="first")
    with pytest.raises(ValueError):
        PoseTransformer(PTConfig(dim=10, heads=3))


def test_zero_head_is_identity():
    m = PoseTransformer(SMALL).double()
    with torch.no_grad():
        m.head.weight.zero_()
        m.head.bias.zero_()
    x = torch.randn(2, J, 3, dtype=torch.float64)
    assert torch.equal(m(x)[0], x)


def test_joint_confidence_loop_oracle():
    rng = np.random.default_rng(0)
    a = rng.random((2, 8, J, J))
    a /= a.sum(-1, keepdims=True)
    conf = joint_confidence(torch.from_numpy(a)).numpy()
    for b in range(2):
        for j in range(J):
            ref = sum(a[b, h, q, j] for h in range(8) for q in range(J))
            assert conf[b, j] == pytest.approx(ref, rel=1e-12)
    np.testing.assert_allclose(conf.sum(-1), 8 * J, rtol=1e-12)


def test_mask_count():
    assert mask_count(0.4, 17) == 7
    assert mask_count(0.5, 3) == 2  # 1.5 rounds away from zero
    with pytest.raises(ValueError):
        mask_count(0.02, 17)


def test_pad_masked():
    x = torch.randn(2, J, 3)
    mask = torch.zeros(2, J, dtype=torch.bool)
    mask[0, 4] = mask[1, 9] = True
    y = pad_masked(x, mask, 0.25)
    assert (y[0, 4] == 0.25).all() and (y[1, 9] == 0.25).all()
    assert torch.equal(y[~mask], x[~mask])


def test_top_k_confident_ties_and_subset():
    conf = torch.tensor([[1.0, 5.0, 5.0, 0.5, 9.0]])
    mask = torch.tensor([[True, True, True, True, False]])
    keep = top_k_confident(conf, mask, 2)
    assert keep.tolist() == [[False, True, True, False, False]]
    keep1 = top_k_confident(conf, mask, 1)
    assert keep1.tolist() == [[False, True, False, False, False]]


def test_random_masks_counts():
    m = random_masks(np.random.default_rng(0), 50, 7)
    assert (m.sum(-1) == 7).all()


def test_algorithm_trace_bookkeeping():
    m = PoseTransformer(PTConfig(dim=16, depth=2, heads=8)).double()
    gt = torch.randn(6, J, 3, dtype=torch.float64) * 0.3
    trace = []
    out, loss = iterative_mask_recover(m, gt, np.random.default_rng(3), trace=trace)
    assert [int(t["mask"][0].sum()) for t in trace] == [7, 5]
    first, last = trace
    assert (first["keep"] <= first["mask"]).all()
    assert (first["keep"].sum(-1) == 2).all()
    torch.testing.assert_close(first["confidence"].sum(-1), torch.full((6,), 136.0, dtype=torch.float64),
                               atol=1e-9, rtol=0)
    assert torch.equal(last["mask"], first["mask"] & ~first["keep"])
    for t in trace:
        assert (t["input"][t["mask"]] == 0.0).all()
    assert torch.equal(first["input"][~first["mask"]], gt[~first["mask"]])
    # round-2 input takes the round-1 recovery everywhere outside the remaining mask
    with torch.no_grad():
        rec1, _ = m(first["input"])
    free = ~last["mask"]
    torch.testing.assert_close(last["input"][free], rec1[free], atol=1e-12, rtol=0)
    torch.testing.assert_close(loss, (out - gt).norm(dim=-1).mean())


def test_single_round_is_one_masked_pass():
    m = PoseTransformer(SMALL).double()
    gt = torch.randn(3, J, 3, dtype=torch.float64)
    mask = random_masks(np.random.default_rng(1), 3, 7)
    out, _ = iterative_mask_recover(m, gt, None, T=1, mask=mask)
    torch.testing.assert_close(out, m(pad_masked(gt, mask))[0], atol=0, rtol=0)


def test_iteration_schedule_validation():
    m = PoseTransformer(SMALL)
    gt = torch.zeros(1, J, 3)
    with pytest.raises(ValueError):
        iterative_mask_recover(m, gt, np.random.default_rng(0), T=5, K=2)
    with pytest.raises(ValueError):
        iterative_mask_recover(m, gt, np.random.default_rng(0), T=0)
    with pytest.raises(ValueError):
        iterative_mask_recover(m, gt, np.random.default_rng(0), ratio=0.01)


def test_inner_pass_gradient_switch():
    m = PoseTransformer(SMALL).double()
    gt = torch.randn(2, J, 3, dtype=torch.float64)
    mask = random_masks(np.random.default_rng(0), 2, 7)
    grads = []
    for detach in (False, True):
        m.zero_grad()
        iterative_mask_recover(m, gt, None, mask=mask, detach_inner=detach)[1].backward()
        grads.append(m.joint_embed.weight.grad.clone())
    assert not torch.equal(grads[0], grads[1])


def test_normalize_roundtrip():
    poses = torch.from_numpy(_poses(4))
    n, root = normalize_pose(poses, 1000.0)
    assert (n[:, PELVIS] == 0).all()
    torch.testing.assert_close(denormalize_pose(n, root, 1000.0), poses, atol=1e-9, rtol=0)
    a, r0 = normalize_pose(poses, 1000.0, relative=False)
    assert (r0 == 0).all()


def test_constant_pad_error_oracle():
    p = torch.tensor([[[3.0, 4.0, 0.0], [1.0, 0.0, 0.0]]])
    mask = torch.tensor([[True, False]])
    assert constant_pad_error(p, mask) == 5.0


def test_refine_relative_is_translation_equivariant():
    m = PoseTransformer(SMALL).double()
    pose = _poses(2)
    t = np.array([120.0, -40.0, 300.0])
    a = refine_pose(m, pose)
    b = refine_pose(m, pose + t)
    np.testing.assert_allclose(b, a + t, atol=1e-9)
    assert isinstance(a, np.ndarray)


def test_refine_occ_mask_pads_flagged_joints():
    m = PoseTransformer(SMALL).double()
    pose = _poses(1)
    occ = np.zeros((1, J), bool)
    occ[0, 13] = True
    moved = pose.copy()
    moved[0, 13] += 500.0
    np.testing.assert_allclose(refine_pose(m, pose, "occ_mask", occ), refine_pose(m, moved, "occ_mask", occ),
                               atol=1e-9)
    with pytest.raises(ValueError):
        refine_pose(m, pose, "occ_mask")
    with pytest.raises(ValueError):
        refine_pose(m, pose, "conf_mask")


def test_refine_tensor_is_differentiable():
    m = PoseTransformer(SMALL).double()
    pose = torch.from_numpy(_poses(1)).requires_grad_()
    refine_pose(m, pose).sum().backward()
    assert pose.grad is not None and torch.isfinite(pose.grad).all()


def test_scheduled_lr_warmup_then_cosine():
    cfg = PretrainConfig(lr=1e-3, warmup_epochs=1.0)
    lrs = [scheduled_lr(cfg, s, 10, 100) for s in range(100)]
    assert lrs[0] == pytest.approx(1e-4) and lrs[9] == pytest.approx(1e-3)
    assert lrs[10] == pytest.approx(1e-3)
    assert all(a >= b for a, b in zip(lrs[10:], lrs[11:]))
    assert lrs[-1] < 1e-5


def test_pretrain_rejects_small_corpus():
    with pytest.raises(ValueError, match="at least"):
        pretrain_pt(_poses(10), SMALL, PretrainConfig(), seed=0)
    with pytest.raises(ValueError):
        pretrain_pt(np.zeros((2000, 16, 3)), SMALL, PretrainConfig(), seed=0)


def test_pretrain_smoke_learns_and_logs(tmp_path):
    corpus, held = _poses(1000, 1), _poses(200, 2)
    res = pretrain_pt(corpus, SMALL, PretrainConfig(epochs=3, batch_size=64, min_corpus=1000), seed=0,
                      heldout_mm=held, log_path=tmp_path / "log.csv")
    errs = [r["heldout_masked_mpjpe_mm"] for r in res.log]
    assert errs[-1] < res.baseline_mm
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss_mm,heldout_masked_mpjpe_mm" and len(lines) == 4
    again = pretrain_pt(corpus, SMALL, PretrainConfig(epochs=3, batch_size=64, min_corpus=1000), seed=0,
                        heldout_mm=held)
    assert [r["train_loss_mm"] for r in again.log] == [r["train_loss_mm"] for r in res.log]


def test_masked_recovery_error_single_pass_matches_manual():
    m = PoseTransformer(SMALL).double()
    p = torch.randn(5, J, 3, dtype=torch.float64)
    mask = random_masks(np.random.default_rng(0), 5, 7)
    with torch.no_grad():
        out = m(pad_masked(p, mask))[0]
    ref = float((out - p).norm(dim=-1)[mask].mean())
    assert masked_recovery_error(m, p, mask, T=1) == pytest.approx(ref, rel=1e-12)
    assert masked_recovery_error(m, p, mask, batch_size=2, T=1) == pytest.approx(ref, rel=1e-12)


def test_write_pretrain_log(tmp_path):
    p = write_pretrain_log([dict(epoch=1, train_loss_mm=2.5, heldout_masked_mpjpe_mm=float("nan"))],
                           tmp_path / "x.csv")
    assert p.read_text().splitlines()[1] == "1,2.5,nan"
