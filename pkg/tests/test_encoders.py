import numpy as np
import pytest
import torch
from torch import nn

from conftest import toy_config
from fundusfuse.config import EncoderConfig, TrainConfig
from fundusfuse.encoders import ImageEncoder, StructuredEncoder, TextEncoder, ToyVisionBackbone, sequence_lengths
from fundusfuse.errors import NonFiniteInput, ShapeError
from fundusfuse.model import build_model
from fundusfuse.training import build_optimizer, compute_losses, trainable_parameters


def toy_encoder_cfg(**kw):
    return EncoderConfig(**{**toy_config().encoder.__dict__, **kw})


def test_default_sequence_lengths():
    assert sequence_lengths(EncoderConfig()) == {"image": 197, "text": 51, "structured": 2}


def test_toy_sequence_lengths():
    cfg = toy_encoder_cfg(patch_size=16)
    assert sequence_lengths(cfg)["image"] == 5
    assert sequence_lengths(toy_encoder_cfg())["text"] == 9


@pytest.mark.parametrize("side, patch, kept", [(32, 16, 8), (32, 8, 4), (16, 4, 12)])
def test_encoder_lengths_match_formula(side, patch, kept):
    cfg = toy_encoder_cfg(image_side=side, patch_size=patch, kept_tokens=kept)
    img, txt, st = ImageEncoder(cfg), TextEncoder(cfg), StructuredEncoder(cfg)
    a = img(torch.rand(2, 3, side, side))
    b = txt(torch.randint(0, cfg.vocab_size, (2, cfg.max_tokens)))
    c = st(torch.randn(2, 6))
    assert a.embeddings.shape == (2, (side // patch) ** 2 + 1, cfg.model_dim)
    assert b.embeddings.shape == (2, kept + 1, cfg.model_dim)
    assert c.embeddings.shape == (2, 2, cfg.model_dim)
    assert (a.modality, b.modality, c.modality) == ("image", "text", "structured")


def test_image_cls_is_first_token():
    enc = ImageEncoder(toy_encoder_cfg())
    seq = enc(torch.rand(3, 3, 32, 32))
    for row in seq.embeddings[:, 0]:
        torch.testing.assert_close(row, enc.cls, rtol=0, atol=0)


def test_patch_embedding_matmul_oracle():
    bb = ToyVisionBackbone(16, 8, 6, 1, 2)
    images = torch.rand(2, 3, 16, 16)
    got = bb.patchify(images).detach().numpy()
    w = bb.patch_embed.weight.detach().numpy().reshape(6, -1)
    b = bb.patch_embed.bias.detach().numpy()
    x = images.numpy()
    for n in range(2):
        k = 0
        for r in range(2):
            for c in range(2):
                patch = x[n, :, 8 * r:8 * r + 8, 8 * c:8 * c + 8].reshape(-1)
                np.testing.assert_allclose(got[n, k], w @ patch + b, rtol=1e-5, atol=1e-5)
                k += 1
    # the second image differs in every patch, so every embedding differs
    assert not np.allclose(got[0], got[1])


def test_image_shape_errors():
    enc = ImageEncoder(toy_encoder_cfg())
    with pytest.raises(ShapeError):
        enc(torch.rand(1, 3, 16, 16))
    with pytest.raises(ShapeError):
        enc(torch.rand(1, 1, 32, 32))


class FixedBackbone(nn.Module):
    width = 4

    def __init__(self, hidden):
        super().__init__()
        self.hidden = hidden

    def forward(self, ids, mask=None):
        return self.hidden


def test_text_projection_oracle():
    cfg = toy_encoder_cfg(model_dim=3, max_tokens=6, kept_tokens=2)
    hidden = torch.tensor([[[1.0, 2.0, 0.0, -1.0], [0.5, 0.0, 3.0, 1.0], [9.0, 9.0, 9.0, 9.0],
                            [0.0] * 4, [0.0] * 4, [0.0] * 4]])
    enc = TextEncoder(cfg, FixedBackbone(hidden))
    with torch.no_grad():
        enc.proj.weight.copy_(torch.tensor([[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 1.0, 0.0], [1.0, -1.0, 0.0, 2.0]]))
        enc.proj.bias.copy_(torch.tensor([0.0, 1.0, -1.0]))
    ids = torch.zeros(1, 6, dtype=torch.long)
    mask = torch.tensor([[True, True, True, False, False, False]])
    seq = enc(ids, mask)
    # hand-computed W h + b for the first two states; the third is dropped by truncation
    expected = torch.tensor([[1.0, 3.0, -4.0], [0.5, 4.0, 1.5]])
    torch.testing.assert_close(seq.embeddings[0, 1:], expected)
    torch.testing.assert_close(seq.embeddings[0, 0], enc.cls)
    assert seq.mask.tolist() == [[True, True, True]]


def test_text_mask_marks_padding():
    cfg = toy_encoder_cfg()
    enc = TextEncoder(cfg)
    mask = torch.zeros(1, cfg.max_tokens, dtype=torch.bool)
    mask[0, :3] = True
    seq = enc(torch.ones(1, cfg.max_tokens, dtype=torch.long), mask)
    assert seq.mask[0].tolist() == [True, True, True, True] + [False] * (cfg.kept_tokens - 3)


def test_text_length_overflow():
    cfg = toy_encoder_cfg()
    with pytest.raises(ShapeError):
        TextEncoder(cfg)(torch.zeros(1, cfg.max_tokens + 1, dtype=torch.long))


def relu(x):
    return np.maximum(x, 0.0)


def test_structured_mlp_oracle():
    cfg = toy_encoder_cfg(model_dim=4, structured_hidden1=5, structured_hidden2=3)
    enc = StructuredEncoder(cfg).eval()
    rng = np.random.default_rng(0)
    layers = [m for m in enc.mlp if isinstance(m, nn.Linear)]
    weights = []
    with torch.no_grad():
        for lin in layers:
            w = rng.normal(size=lin.weight.shape)
            b = rng.normal(size=lin.bias.shape)
            lin.weight.copy_(torch.from_numpy(w))
            lin.bias.copy_(torch.from_numpy(b))
            weights.append((w, b))
    x = np.array([1.0, 0, 0, 0, 0, 0])
    (w1, b1), (w2, b2), (w3, b3) = weights
    expected = w3 @ relu(w2 @ relu(w1 @ x + b1) + b2) + b3
    out = enc(torch.tensor(x[None], dtype=torch.float32))
    np.testing.assert_allclose(out.embeddings[0, 1].detach().numpy(), expected, rtol=1e-5, atol=1e-5)


def test_structured_zero_input_zero_bias():
    enc = StructuredEncoder(toy_encoder_cfg()).eval()
    with torch.no_grad():
        for m in enc.mlp:
            if isinstance(m, nn.Linear):
                m.bias.zero_()
    out = enc(torch.zeros(2, 6))
    assert out.embeddings.shape[1] == 2
    assert torch.count_nonzero(out.embeddings[:, 1]) == 0


def test_structured_rejects_nonfinite():
    enc = StructuredEncoder(toy_encoder_cfg())
    with pytest.raises(NonFiniteInput):
        enc(torch.tensor([[float("nan"), 0, 0, 0, 0, 0]]))


def test_structured_dropout_only_in_training():
    enc = StructuredEncoder(toy_encoder_cfg(structured_dropout=0.5))
    x = torch.randn(4, 6)
    enc.eval()
    torch.testing.assert_close(enc(x).embeddings, enc(x).embeddings, rtol=0, atol=0)
    enc.train()
    assert not torch.equal(enc(x).embeddings, enc(x).embeddings)


def test_eval_mode_deterministic(toy_bundle, toy_batch):
    model = build_model(toy_bundle.cfg, 0).eval()
    a = model.encode(toy_batch)
    b = model.encode(toy_batch)
    for m in a:
        torch.testing.assert_close(a[m].embeddings, b[m].embeddings, rtol=0, atol=0)


def test_frozen_parameters(toy_bundle, toy_batch):
    cfg = toy_bundle.cfg
    model = build_model(cfg, 0)
    frozen = {n for n, p in model.named_parameters() if not p.requires_grad}
    expected_prefixes = (
        "image_encoder.backbone.patch_embed", "image_encoder.backbone.class_token",
        "image_encoder.backbone.pos_embed", "image_encoder.backbone.blocks.0.",
        "text_encoder.backbone.token_embed", "text_encoder.backbone.pos_embed",
        "text_encoder.backbone.embed_norm", "text_encoder.backbone.blocks.0.",
    )
    assert frozen and all(n.startswith(expected_prefixes) for n in frozen)
    assert any(n.startswith("image_encoder.backbone.blocks.1.") for n, p in model.named_parameters()
               if p.requires_grad)
    # projections stay trainable regardless of freeze depth
    assert model.image_encoder.proj.weight.requires_grad and model.text_encoder.proj.weight.requires_grad
    # frozen parameters never reach the optimizer
    registered = {id(p) for g in build_optimizer(model, cfg.train).param_groups for p in g["params"]}
    assert not registered & {id(p) for n, p in model.named_parameters() if n in frozen}

    compute_losses(model, toy_batch, cfg.train).total.backward()
    for n, p in model.named_parameters():
        if n in frozen:
            assert p.grad is None or torch.count_nonzero(p.grad) == 0, n


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_unfrozen_parameters_receive_gradient(toy_bundle, toy_batch, seed):
    cfg = toy_bundle.cfg
    model = build_model(cfg, seed)
    compute_losses(model, toy_batch, cfg.train).total.backward()
    silent = [n for n, p in trainable_parameters(model, cfg.train)
              if p.grad is None or torch.count_nonzero(p.grad) == 0]
    # null vectors only enter when a modality is absent
    assert silent == ["fusion.null_cls"]
    model.zero_grad()
    tc = TrainConfig(**{**cfg.train.__dict__, "use_text": False})
    compute_losses(model, toy_batch, tc).total.backward()
    assert torch.count_nonzero(model.fusion.null_cls.grad[1]) > 0
