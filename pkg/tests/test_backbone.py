import numpy as np
import pytest
import torch

from ksvqe.backbone import (
    Backbone,
    BackboneSpec,
    StageSpec,
    SwinBlock3D,
    desk_backbone,
    paper_backbone,
    window_partition,
    window_reverse,
)


def toy_spec(**kw):
    base = dict(
        stages=(StageSpec(1, 32, (2, 7, 7), 4), StageSpec(1, 32, (2, 7, 7), 4)),
        patch=(2, 4, 4),
        head_hidden=32,
    )
    base.update(kw)
    return BackboneSpec(**base)


def test_zero_head_scores_zero():
    torch.manual_seed(0)
    bb = Backbone(toy_spec(zero_head=True))
    assert torch.all(bb(torch.rand(3, 8, 56, 56, 3)) == 0)


def test_window_partition_roundtrip():
    x = torch.randn(2, 4, 14, 14, 5)
    win = (2, 7, 7)
    w = window_partition(x, win)
    assert w.shape == (2 * 2 * 2 * 2, 98, 5)
    assert torch.equal(window_reverse(w, win, 2, 4, 14, 14), x)


def test_shifted_windows_do_not_wrap():
    torch.manual_seed(0)
    blk = SwinBlock3D(8, (2, 4, 4), 2, shifted=True).double().eval()
    x = torch.randn(1, 4, 8, 8, 8, dtype=torch.float64)
    y = x.clone()
    y[0, 0, 0, 0] += 1.0
    diff = (blk(x) - blk(y)).abs().sum(-1)[0] > 0
    # the perturbed corner token sits in the top-left shifted region [0, shift) on every axis
    changed = set(zip(*np.nonzero(diff.numpy())))
    assert changed and all(t < 1 and h < 2 and w < 2 for t, h, w in changed)


def test_unshifted_window_locality():
    torch.manual_seed(0)
    blk = SwinBlock3D(8, (2, 4, 4), 2, shifted=False).double().eval()
    x = torch.randn(1, 2, 8, 8, 8, dtype=torch.float64)
    y = x.clone()
    y[0, 1, 5, 6] += 1.0
    diff = ((blk(x) - blk(y)).abs().sum(-1)[0] > 0).numpy()
    assert diff[:, 4:, 4:].any() and not diff[:, :4].any() and not diff[:, :, :4].any()


def test_window_must_divide_grid():
    blk = SwinBlock3D(8, (2, 3, 3), 2, shifted=False)
    with pytest.raises(ValueError):
        blk(torch.randn(1, 2, 4, 4, 8))


def test_hooks_are_applied_per_stage():
    torch.manual_seed(0)
    bb = Backbone(toy_spec()).eval()
    video = torch.rand(2, 8, 56, 56, 3)
    seen = []

    def hook(tokens, grid):
        seen.append((tokens.shape, grid))
        return tokens

    base = bb(video)
    out = bb(video, hooks={0: hook, 1: hook})
    assert torch.equal(base, out)
    assert seen == [(torch.Size([2, 4 * 14 * 14, 32]), (4, 14, 14))] * 2


def test_toy_backbone_learns_small_set():
    """Smoke run on 8x56x56 clips: the loss drops over 50 steps."""
    torch.manual_seed(0)
    bb = Backbone(toy_spec())
    x = torch.rand(16, 8, 56, 56, 3)
    y = torch.rand(16)
    opt = torch.optim.AdamW(bb.parameters(), lr=1e-3)
    losses = []
    for _ in range(50):
        loss = ((bb(x) - y) ** 2).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
    assert losses[-1] < 0.5 * losses[0]
    assert all(p.grad is not None for p in bb.parameters())


@pytest.mark.slow
def test_toy_backbone_memorises():
    torch.manual_seed(1)
    spec = BackboneSpec(stages=(StageSpec(1, 32, (2, 4, 4), 4), StageSpec(1, 32, (2, 4, 4), 4)), patch=(2, 4, 4), head_hidden=32)
    bb = Backbone(spec)
    x = torch.rand(16, 4, 16, 16, 3)
    y = torch.rand(16) * 4 + 1
    opt = torch.optim.AdamW(bb.parameters(), lr=2e-3, weight_decay=0.0)
    for _ in range(500):
        loss = ((bb(x) - y) ** 2).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
    with torch.no_grad():
        assert float(((bb(x) - y) ** 2).mean()) < 1e-3


def test_forward_is_repeatable():
    torch.manual_seed(0)
    bb = Backbone(desk_backbone()).eval()
    v = torch.rand(2, 8, 42, 42, 3)
    assert torch.equal(bb(v), bb(v))


def test_profiles():
    paper = paper_backbone()
    assert paper.out_width == 768
    assert paper.token_grid(32, 224, 224) == (16, 7, 7)
    assert paper.inject_stages == (2, 3)
    desk = desk_backbone()
    assert desk.out_width <= 64 and len(desk.stages) == 2
    assert desk.token_grid(8, 42, 42) == (4, 7, 7)
    with pytest.raises(ValueError):
        desk.token_grid(8, 40, 40)
    with pytest.raises(ValueError):
        BackboneSpec(stages=(StageSpec(1, 8),), inject_stages=(3,))
