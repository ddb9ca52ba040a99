import pytest
import torch

from gdmrg.errors import ConfigError, ShapeError
from gdmrg.numcore import DTYPE, finite_diff_check
from gdmrg.vision import DiagnosticEnhancement, PatchEncoder, dse_forward, gap


def test_identity_encoder_is_bit_exact():
    raw = torch.randn(2, 4, 8, dtype=DTYPE)
    assert torch.equal(PatchEncoder(8, 8, identity=True)(raw), raw)
    with pytest.raises(ConfigError):
        PatchEncoder(8, 6, identity=True)


def test_zero_input_broadcasts_bias():
    enc = PatchEncoder(5, 3)
    out = enc(torch.zeros(2, 4, 5, dtype=DTYPE))
    assert torch.equal(out, enc.proj.bias.detach().expand(2, 4, 3))


def test_encoder_rejects_wrong_width():
    with pytest.raises(ShapeError):
        PatchEncoder(5, 3)(torch.zeros(2, 4, 6, dtype=DTYPE))


def test_gap_cases():
    v = torch.randn(1, 1, 3, dtype=DTYPE).expand(1, 5, 3)
    torch.testing.assert_close(gap(v), v[:, 0])
    e1 = torch.tensor([[[1.0, 0.0], [-1.0, 0.0]]], dtype=DTYPE)
    assert torch.count_nonzero(gap(e1)) == 0
    r = torch.randn(3, 7, 4, dtype=DTYPE)
    torch.testing.assert_close(gap(r), r.sum(1) / 7, rtol=0, atol=1e-15)
    with pytest.raises(ShapeError):
        gap(torch.zeros(2, 0, 3, dtype=DTYPE))


def test_dse_identity_holds_exactly():
    block = DiagnosticEnhancement(6, 8, reduction=4)
    out = dse_forward(torch.randn(3, 6, dtype=DTYPE), block)
    assert torch.equal(out.x - out.v_proj - out.v_proj * out.w_c, torch.zeros_like(out.x))
    assert ((out.w_c > 0) & (out.w_c < 1)).all()


def test_dse_zero_projection_gives_zero():
    block = DiagnosticEnhancement(6, 8, reduction=4)
    with torch.no_grad():
        block.proj.weight.zero_()
        block.proj.bias.zero_()
    assert torch.count_nonzero(block(torch.randn(2, 6, dtype=DTYPE)).x) == 0


def test_dse_large_negative_gate_bias_returns_projection():
    block = DiagnosticEnhancement(6, 8, reduction=4)
    with torch.no_grad():
        block.excite.weight.zero_()
        block.excite.bias.fill_(-1e3)
    out = block(torch.randn(2, 6, dtype=DTYPE))
    torch.testing.assert_close(out.x, out.v_proj)


def test_dse_disabled_passes_projection():
    block = DiagnosticEnhancement(6, 8, reduction=4, enabled=False)
    out = block(torch.randn(2, 6, dtype=DTYPE))
    assert torch.equal(out.x, out.v_proj)


def test_dse_rejects_bad_reduction():
    with pytest.raises(ConfigError):
        DiagnosticEnhancement(6, 10, reduction=4)


def test_encoder_and_dse_gradients():
    enc = PatchEncoder(5, 6)
    block = DiagnosticEnhancement(6, 8, reduction=2)
    raw = torch.randn(2, 3, 5, dtype=DTYPE)
    params = list(enc.parameters()) + list(block.parameters())
    err = finite_diff_check(lambda: block(gap(enc(raw))).x.pow(2).sum(), params)
    assert err < 1e-4
