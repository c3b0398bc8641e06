import math

import numpy as np
import pytest
import torch

from jffra.cost_volume import cost_volume_tensor
from jffra.jffr import (
    AttentionMaps,
    FlowHead,
    JFFRBlock,
    LevelState,
    WindowAttention,
    attention_refine,
    flow_head,
    jffr_forward,
    refine_flow,
)
from jffra.types import ParameterError, ShapeError
from jffra.warp import warp_tensor


def _state(C=4, H=8, W=8, N=1, seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    f = [torch.rand(N, C, H, W, generator=g, dtype=dtype) for _ in range(3)]
    fl = [torch.randn(N, 2, H, W, generator=g, dtype=dtype) for _ in range(2)]
    return LevelState(*f, *fl)


def naive_window_attention(x, attn: WindowAttention):
    """Per-window loops with explicit per-head softmax; H, W multiples of ws."""
    N, D, H, W = x.shape
    ws, heads = attn.window_size, attn.heads
    hd = D // heads
    out = torch.zeros_like(x)
    for n in range(N):
        for wy in range(0, H, ws):
            for wx in range(0, W, ws):
                tile = x[n, :, wy : wy + ws, wx : wx + ws].reshape(D, -1).T
                q, k, v = attn.proj_q(tile), attn.proj_k(tile), attn.proj_v(tile)
                chunks = []
                for h in range(heads):
                    s = slice(h * hd, (h + 1) * hd)
                    a = torch.softmax(q[:, s] @ k[:, s].T / math.sqrt(hd), dim=-1)
                    chunks.append(a @ v[:, s])
                y = attn.out_proj(torch.cat(chunks, dim=1))
                out[n, :, wy : wy + ws, wx : wx + ws] = y.T.reshape(D, ws, ws)
    return out


def test_window_attention_matches_naive_loops():
    torch.manual_seed(0)
    attn = WindowAttention(12, heads=3, window_size=4).double()
    x = torch.randn(2, 12, 8, 12, dtype=torch.float64)
    y, maps = attn(x)
    torch.testing.assert_close(y, naive_window_attention(x, attn))
    assert maps.values.shape == (2 * 2 * 3, 3, 16, 16)


@pytest.mark.parametrize("seed", range(10))
def test_attention_rows_are_stochastic(seed):
    torch.manual_seed(seed)
    attn = WindowAttention(8, heads=2, window_size=4)
    _, maps = attn(torch.randn(1, 8, 10, 7) * 5)
    assert isinstance(maps, AttentionMaps)
    assert maps.is_row_stochastic(1e-5)


def test_padded_tokens_get_no_attention():
    torch.manual_seed(0)
    attn = WindowAttention(4, heads=1, window_size=4)
    _, maps = attn(torch.randn(1, 4, 3, 3))
    a = maps.values[0, 0]
    valid = torch.zeros(4, 4, dtype=torch.bool)
    valid[:3, :3] = True
    assert torch.all(a[:, ~valid.flatten()] == 0)


def test_partial_window_attends_only_to_real_pixels():
    torch.manual_seed(0)
    attn = WindowAttention(4, heads=2, window_size=4).double()
    x = torch.randn(1, 4, 3, 3, dtype=torch.float64)
    y, _ = attn(x)
    tokens = x[0].reshape(4, -1).T
    q, k, v = attn.proj_q(tokens), attn.proj_k(tokens), attn.proj_v(tokens)
    heads = []
    for h in range(2):
        s = slice(2 * h, 2 * h + 2)
        heads.append(torch.softmax(q[:, s] @ k[:, s].T / math.sqrt(2), -1) @ v[:, s])
    want = attn.out_proj(torch.cat(heads, 1)).T.reshape(4, 3, 3)
    torch.testing.assert_close(y[0], want)


def test_attention_refine_split_order():
    class Tag(torch.nn.Module):
        def forward(self, x):
            return x, None

    a, b, c = (torch.full((1, 2, 4, 4), v) for v in (1.0, 2.0, 3.0))
    r_prev, r_ref, r_next, _ = attention_refine(a, b, c, Tag())
    assert r_prev.unique().item() == 1.0
    assert r_ref.unique().item() == 2.0
    assert r_next.unique().item() == 3.0


def test_flow_head_is_zero_initialised_and_checked():
    head = FlowHead(4, radius=4, hidden=8)
    cost = torch.rand(1, 9, 9, 8, 8)
    f = torch.rand(1, 4, 8, 8)
    assert torch.all(flow_head(cost, f, f, head) == 0)
    with pytest.raises(ShapeError):
        head(torch.rand(1, 5, 5, 8, 8), f, f)
    with pytest.raises(ShapeError):
        head(cost, torch.rand(1, 3, 8, 8), f)


def test_flow_head_ignores_cost_scale():
    torch.manual_seed(0)
    head = FlowHead(4, radius=2, hidden=8).double()
    torch.nn.init.normal_(head.convs[-1].weight)
    cost = 50 * torch.rand(2, 5, 5, 6, 6, dtype=torch.float64) + 5
    f = torch.rand(2, 4, 6, 6, dtype=torch.float64)
    # positive affine changes of the costs leave the standardised input alone
    torch.testing.assert_close(head(cost, f, f), head(7.0 * cost + 3.0, f, f), rtol=1e-6, atol=1e-6)


@pytest.mark.parametrize("seed", range(10))
def test_zero_head_keeps_flow(seed):
    st = _state(seed=seed, H=10, W=12)
    blk = JFFRBlock(4, heads=2, window_size=4, radius=2, flow_hidden=8).double()
    out = jffr_forward(st, blk)
    assert torch.equal(out.flow_prev, st.flow_prev)
    assert torch.equal(out.flow_next, st.flow_next)


def test_refine_flow_adds_offset():
    a, b = torch.ones(1, 2, 3, 3), torch.full((1, 2, 3, 3), 0.5)
    assert torch.all(refine_flow(a, b) == 1.5)
    with pytest.raises(ShapeError):
        refine_flow(a, torch.ones(1, 2, 3, 4))


def _block_oracle(st, blk):
    """Same computation spelled out with the library primitives."""

    def corrected(f_other, flow):
        cost = cost_volume_tensor(st.f_ref, warp_tensor(f_other, flow), blk.radius)
        N, d, _, H, W = cost.shape
        c = cost.reshape(N, d * d, H, W)
        flat = c.reshape(N, -1)
        mu, var = flat.mean(1).view(N, 1, 1, 1), flat.var(1, unbiased=False).view(N, 1, 1, 1)
        c = (c - mu) / torch.sqrt(var + 1e-6)
        x = torch.cat([c, st.f_ref, f_other], 1)
        for conv in blk.flow_head.convs[:-1]:
            x = torch.nn.functional.leaky_relu(conv(x), 0.1)
        return flow + blk.flow_head.convs[-1](x)

    fp, fn = corrected(st.f_prev, st.flow_prev), corrected(st.f_next, st.flow_next)
    up, un = warp_tensor(st.f_prev, fp), warp_tensor(st.f_next, fn)
    C = st.f_ref.shape[1]
    y = naive_window_attention(torch.cat([st.f_ref, up, un], 1), blk.attention)
    return st.f_prev + y[:, C : 2 * C], st.f_ref + y[:, :C], st.f_next + y[:, 2 * C :], fp, fn


def test_block_matches_spelled_out_computation():
    torch.manual_seed(3)
    blk = JFFRBlock(4, heads=2, window_size=4, radius=2, flow_hidden=8).double()
    torch.nn.init.normal_(blk.flow_head.convs[-1].weight, std=0.1)
    st = _state(H=8, W=8)
    out = blk(st)
    want = _block_oracle(st, blk)
    for got, exp in zip((out.f_prev, out.f_ref, out.f_next, out.flow_prev, out.flow_next), want):
        torch.testing.assert_close(got, exp)


def test_residual_target_and_refinement_toggle():
    torch.manual_seed(0)
    st = _state()
    blk = JFFRBlock(4, heads=2, window_size=4, radius=2, flow_hidden=8, residual_target="warped").double()
    out, _ = blk.forward_with_maps(st)
    with torch.no_grad():
        _, r_ref, _, _ = attention_refine(warp_tensor(st.f_prev, st.flow_prev), st.f_ref, warp_tensor(st.f_next, st.flow_next), blk.attention)
    torch.testing.assert_close(out.f_ref, st.f_ref + r_ref)

    off = JFFRBlock(4, heads=2, window_size=4, radius=2, refine_flow=False).double()
    torch.nn.init.normal_(off.flow_head.convs[-1].weight)
    assert torch.equal(off(st).flow_prev, st.flow_prev)
    with pytest.raises(ParameterError):
        JFFRBlock(4, residual_target="both")


def test_level_state_validation():
    f = torch.zeros(1, 4, 8, 8)
    with pytest.raises(ShapeError):
        LevelState(f, f, torch.zeros(1, 4, 8, 7), torch.zeros(1, 2, 8, 8), torch.zeros(1, 2, 8, 8))
    with pytest.raises(ShapeError):
        LevelState(f, f, f, torch.zeros(1, 2, 4, 4), torch.zeros(1, 2, 8, 8))


def _texture_pairs(rng, n, static=False, H=16, W=16, C=4):
    from jffra.data import SinusoidTexture

    tex = SinusoidTexture.random(C, waves=8, min_period=5, max_period=16, seed=int(rng.integers(1 << 30)))
    y, x = np.meshgrid(np.arange(H, dtype=float), np.arange(W, dtype=float), indexing="ij")
    fr, fo, res = [], [], []
    for _ in range(n):
        d = np.zeros(2) if static else rng.uniform(-2, 2, 2)
        ox, oy = rng.uniform(0, 100, 2)
        fr.append(tex.sample(x + ox, y + oy))
        # backward flow d maps ref positions onto the other frame
        fo.append(tex.sample(x + ox - d[0], y + oy - d[1]))
        res.append(d)

    def t(a):
        return torch.tensor(np.moveaxis(np.stack(a), -1, 1), dtype=torch.float32)

    return t(fr), t(fo), torch.tensor(np.stack(res), dtype=torch.float32)


def _fit_head(head, rng, steps, static=False):
    opt = torch.optim.Adam(head.parameters(), 1e-3)
    for _ in range(steps):
        f_ref, f_other, res = _texture_pairs(rng, 8, static)
        off = head(cost_volume_tensor(f_ref, f_other, head.radius), f_ref, f_other)
        loss = (off - res[:, :, None, None]).abs()[..., 4:-4, 4:-4].mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
    return head


def test_flow_head_learns_residuals_below_half_pixel():
    torch.manual_seed(0)
    head = _fit_head(FlowHead(4, 4, hidden=32), np.random.default_rng(0), 600)
    f_ref, f_other, res = _texture_pairs(np.random.default_rng(99), 16)
    with torch.no_grad():
        off = head(cost_volume_tensor(f_ref, f_other, 4), f_ref, f_other)
    # interior sites, whose 9x9 search window stays inside the map
    epe = (off - res[:, :, None, None])[..., 4:-4, 4:-4].pow(2).sum(1).sqrt().mean().item()
    assert epe < 0.5


def test_static_scene_keeps_flow_near_zero():
    torch.manual_seed(1)
    blk = JFFRBlock(4, heads=2, window_size=4, radius=4, flow_hidden=16)
    _fit_head(blk.flow_head, np.random.default_rng(1), 150, static=True)
    f, _, _ = _texture_pairs(np.random.default_rng(5), 1, static=True)
    zero = torch.zeros(1, 2, 16, 16)
    with torch.no_grad():
        out = blk(LevelState(f, f, f, zero, zero))
    assert out.flow_prev.abs().max().item() < 0.25
    assert out.flow_next.abs().max().item() < 0.25


def test_all_zero_parameters_leave_state_unchanged():
    blk = JFFRBlock(4, heads=2, window_size=4, radius=2, flow_hidden=8).double()
    with torch.no_grad():
        for p in blk.parameters():
            p.zero_()
    st = _state(H=9, W=10)
    out = blk(st)
    for a, b in zip((out.f_prev, out.f_ref, out.f_next, out.flow_prev, out.flow_next), (st.f_prev, st.f_ref, st.f_next, st.flow_prev, st.flow_next)):
        assert torch.equal(a, b)


def test_constant_queries_give_uniform_rows():
    attn = WindowAttention(8, heads=2, window_size=8)
    with torch.no_grad():
        attn.proj_q.weight.zero_()
    _, maps = attn(torch.randn(1, 8, 8, 8))
    torch.testing.assert_close(maps.values, torch.full_like(maps.values, 1 / 64))


def test_single_window_single_head_dense_oracle():
    torch.manual_seed(2)
    attn = WindowAttention(6, heads=1, window_size=8).double()
    x = torch.randn(1, 6, 8, 8, dtype=torch.float64)
    y, _ = attn(x)
    tok = x[0].reshape(6, 64).T
    Wq, Wk, Wv = attn.proj_q.weight, attn.proj_k.weight, attn.proj_v.weight
    A = torch.softmax((tok @ Wq.T) @ (tok @ Wk.T).T / math.sqrt(6), dim=-1)
    dense = (A @ (tok @ Wv.T)) @ attn.out_proj.weight.T + attn.out_proj.bias
    assert (y[0].reshape(6, 64).T - dense).abs().max().item() < 1e-5


def test_refine_flow_examples(rng):
    one = torch.ones(1, 2, 4, 4)
    assert torch.all(refine_flow(one, -one) == 0)
    a, b = torch.tensor(rng.random((2, 2, 5, 5))), torch.tensor(rng.random((2, 2, 5, 5)))
    assert torch.equal(refine_flow(a, b), a + b)


def test_block_is_deterministic():
    torch.manual_seed(0)
    blk = JFFRBlock(4, heads=2, window_size=4, radius=2, flow_hidden=8).double()
    torch.nn.init.normal_(blk.flow_head.convs[-1].weight, std=0.1)
    st = _state()
    a, b = blk(st), blk(st)
    assert torch.equal(a.f_ref, b.f_ref) and torch.equal(a.flow_prev, b.flow_prev)


def test_head_split_validated():
    with pytest.raises(ParameterError):
        WindowAttention(10, heads=4)
