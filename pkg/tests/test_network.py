import numpy as np
import pytest
import torch

from fdcheck import max_relative_error
from mdarsn.exceptions import ConfigurationError
from mdarsn.network import (LEAD_PRESETS, AttentionHead, MDARsn, ModelConfig, ResBlock,
                            count_parameters, masked_mean)

SMALL = ModelConfig(n_leads=2, d_model=52, n_resblocks=2, n_mix=1, first_conv_channels=16,
                    resb_kernel=5, window_seconds=0.12, fs=500.0)


def small(**kw):
    return SMALL.replace(**kw)


def hand_count(cfg: ModelConfig) -> int:
    """Learnable scalars layer by layer, from the architecture description."""
    g, r = cfg.n_leads, cfg.se_reduction
    c0 = g * -(-cfg.first_conv_channels // g)
    total = c0 * cfg.first_conv_kernel  # stem: one input channel per group
    cin = c0
    for i in range(cfg.n_resblocks):
        cout = c0 * 2 ** (i // 2)
        stride = 3 if i in (2, 4, 6, 8, 10) else 1
        cg = cout // g
        hidden = max(1, cg // r)
        total += 2 * cin + cout * (cin // g) * cfg.resb_kernel
        total += 2 * cout + cout * cg * cfg.resb_kernel
        total += cg * hidden + hidden + hidden * cg + cg
        if cin != cout or stride != 1:
            total += cout * (cin // g)
        cin = cout
    d = cfg.d_model
    total += 2 * cin + (cin // g) * d + d
    if cfg.head == "mha":
        total += 4 * (d * d + d) + cfg.d_class * (d // cfg.d_class) + cfg.d_class
    else:
        total += d * cfg.d_class + cfg.d_class
    return total


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("leads,channels", [(12, 132), (6, 132), (4, 128), (3, 129), (2, 128)])
def test_stem_width_rounds_up_to_lead_multiple(leads, channels):
    assert ModelConfig.for_leads(leads).stem_channels == channels


def test_channel_schedule():
    cfg = ModelConfig.for_leads(4)
    assert [cfg.block_channels(i) for i in range(8)] == [128, 128, 256, 256, 512, 512, 1024, 1024]
    assert [cfg.is_downsampling(i) for i in range(8)] == [False, False, True, False,
                                                          True, False, True, False]


def test_config_invariants():
    with pytest.raises(ConfigurationError):
        ModelConfig(d_model=100)
    with pytest.raises(ConfigurationError):
        ModelConfig(heads=13)
    with pytest.raises(ConfigurationError):
        ModelConfig(n_mix=9)
    with pytest.raises(ConfigurationError):
        ModelConfig.for_leads(5)
    with pytest.raises(ConfigurationError):
        ModelConfig.from_dict({"n_leads": 2, "bogus": 1})
    assert ModelConfig.from_dict(SMALL.to_dict()) == SMALL


@pytest.mark.parametrize("head", ["mha", "pool"])
def test_count_parameters_matches_hand_count(head):
    cfg = small(head=head)
    assert count_parameters(cfg) == hand_count(cfg)
    assert count_parameters(cfg) == count_parameters(cfg)


def test_count_parameters_table_configs():
    for leads in (12, 2):
        cfg = ModelConfig.for_leads(leads)
        assert count_parameters(cfg) == hand_count(cfg)


def test_count_parameters_monotone_in_d_model():
    assert count_parameters(small(d_model=104)) > count_parameters(small(d_model=52))


# ---------------------------------------------------------------------------
# residual block
# ---------------------------------------------------------------------------

def test_identity_block_passes_input():
    block = ResBlock(8, 8, 5, 1, groups=2, se_reduction=2).eval()
    with torch.no_grad():
        block.conv1.weight.zero_()
        block.conv2.weight.zero_()
    block.se.force_gate = 1.0
    x = torch.randn(2, 8, 40)
    assert torch.equal(block(x), x)


def test_doubling_block_shapes():
    block = ResBlock(128, 256, 7, 3, groups=2)
    assert block(torch.randn(2, 128, 900)).shape == (2, 256, 300)


def test_block_gradient(rng):
    block = ResBlock(4, 8, 3, 3, groups=2, se_reduction=2, use_mixstyle=True).double()
    block.mixstyle.fixed_lambda = np.array([0.3, 0.7])
    block.mixstyle.fixed_perm = np.array([1, 0])
    x = torch.from_numpy(rng.standard_normal((2, 4, 12)))
    assert max_relative_error(block, [x]) < 1e-4


# ---------------------------------------------------------------------------
# full model
# ---------------------------------------------------------------------------

def test_backbone_token_shapes():
    for leads, d in ((2, 650), (6, 520)):
        model = MDARsn(ModelConfig.for_leads(leads)).eval()
        with torch.no_grad():
            tokens = model.backbone(torch.randn(1, leads, 7500))
        assert tokens.shape == (1, leads, d)


def test_wrong_lead_count_rejected():
    model = MDARsn(SMALL)
    with pytest.raises(ConfigurationError):
        model(torch.randn(1, 3, 60))
    with pytest.raises(ConfigurationError):
        model(torch.randn(1, 2, 60), torch.ones(1, 3, dtype=torch.bool))
    with pytest.raises(ValueError, match="no valid leads"):
        model(torch.randn(1, 2, 60), torch.zeros(1, 2, dtype=torch.bool))


def test_lead_tokens_are_independent(rng):
    cfg = ModelConfig(n_leads=3, d_model=52, n_resblocks=4, n_mix=2, first_conv_channels=24,
                      window_seconds=1.0)
    model = MDARsn(cfg).eval()
    x = torch.from_numpy(rng.standard_normal((2, 3, 500))).float()
    with torch.no_grad():
        a = model.backbone(x)
        y = x.clone()
        y[:, 1] = torch.from_numpy(rng.standard_normal((2, 500))).float() * 10
        b = model.backbone(y)
    assert torch.equal(a[:, 0], b[:, 0]) and torch.equal(a[:, 2], b[:, 2])
    assert not torch.equal(a[:, 1], b[:, 1])


@pytest.mark.parametrize("head", ["mha", "pool"])
def test_masked_lead_does_not_change_logits(rng, head):
    model = MDARsn(small(n_leads=3, first_conv_channels=24, head=head)).eval()
    x = torch.from_numpy(rng.standard_normal((2, 3, 60))).float()
    mask = torch.tensor([[True, False, True], [False, True, True]])
    with torch.no_grad():
        ref = model(x, mask)
        y = x.clone()
        y[0, 1] = 1e4 * torch.randn(60)
        y[1, 0] = -3e3
        assert (model(y, mask) - ref).abs().max() <= 1e-6


def test_single_valid_lead_matches_token_alone(rng):
    model = MDARsn(small(n_leads=3, first_conv_channels=24)).eval()
    x = torch.from_numpy(rng.standard_normal((1, 3, 60))).float()
    mask = torch.tensor([[False, True, False]])
    with torch.no_grad():
        tokens = model.backbone(x)
        alone = model.head(tokens[:, 1:2], torch.ones(1, 1, dtype=torch.bool))
        assert torch.allclose(model(x, mask), alone, atol=1e-6)


def test_head_reshapes_into_class_rows():
    cfg = small()
    head = AttentionHead(cfg).eval()
    tokens = torch.randn(2, 2, 52)
    mask = torch.ones(2, 2, dtype=torch.bool)
    with torch.no_grad():
        pooled = masked_mean(head.attention(tokens, mask), mask)
        manual = torch.stack([pooled[:, 2 * c:2 * c + 2] @ head.class_weight[c]
                              for c in range(26)], dim=1) + head.class_bias
        assert torch.allclose(head(tokens, mask), manual, atol=1e-6)


def test_eval_is_deterministic(rng):
    model = MDARsn(SMALL).eval()
    x = torch.from_numpy(rng.standard_normal((2, 2, 60))).float()
    with torch.no_grad():
        assert torch.equal(model(x), model(x))


def test_same_seed_same_weights():
    a, b = MDARsn(SMALL), MDARsn(SMALL)
    assert all(torch.equal(p, q) for p, q in zip(a.parameters(), b.parameters()))
    c = MDARsn(small(seed=1))
    assert not all(torch.equal(p, q) for p, q in zip(a.parameters(), c.parameters()))


def test_mixstyle_only_in_shallow_blocks():
    model = MDARsn(ModelConfig(n_leads=2, d_model=52, n_resblocks=4, n_mix=2,
                               first_conv_channels=16))
    flags = [b.mixstyle is not None for b in model.backbone.blocks]
    assert flags == [True, True, False, False]
    assert not MDARsn(small(n_mix=0)).mixstyle_layers()


def test_every_parameter_gets_gradient(rng):
    model = MDARsn(small(dropout=0.0)).train()
    x = torch.from_numpy(rng.standard_normal((4, 2, 60))).float()
    mask = torch.tensor([[True, True], [True, False], [False, True], [True, True]])
    model(x, mask).sum().backward()
    dead = [n for n, p in model.named_parameters() if p.grad is None or not p.grad.any()]
    assert dead == []


def test_end_to_end_gradient(rng):
    cfg = small()
    model = MDARsn(cfg).double().eval()
    mask = torch.tensor([[True, True], [True, False]])
    x = torch.from_numpy(rng.standard_normal((2, 2, 60)))
    assert max_relative_error(lambda x: model(x, mask), [x]) < 1e-3
