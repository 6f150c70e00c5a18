import numpy as np
import pytest
import torch

from oracles import np_layer_norm, np_prenorm_layer, weights_of
from fundusfuse.config import DecoderConfig, RunConfig
from fundusfuse.decoders import ImageDecoder, TextDecoder, upsampling_plan
from fundusfuse.errors import LengthOverflow
from fundusfuse.model import build_model
from fundusfuse.objectives import reconstruction_image_loss, reconstruction_text_loss


def test_upsampling_plan():
    assert upsampling_plan(224) == (7, 5)
    assert upsampling_plan(32) == (1, 5)
    assert upsampling_plan(16) == (1, 4)


@pytest.mark.parametrize("side", [16, 32, 224])
def test_image_decoder_shape_and_range(side):
    cfg = DecoderConfig(image_channels=16, image_min_channels=4)
    dec = ImageDecoder(cfg, 8, side)
    out = dec(torch.randn(2, 8) * 10)
    assert out.shape == (2, 3, side, side)
    assert out.min() >= 0 and out.max() <= 1


def test_image_decoder_zero_gives_half():
    dec = ImageDecoder(DecoderConfig(image_channels=8, image_min_channels=4), 8, 16)
    with torch.no_grad():
        for p in dec.parameters():
            p.zero_()
    out = dec(torch.zeros(1, 8))
    torch.testing.assert_close(out, torch.full((1, 3, 16, 16), 0.5))


def text_decoder(layers=1, heads=2, d=8, vocab=11, max_len=6):
    cfg = DecoderConfig(text_layers=layers, text_heads=heads)
    return TextDecoder(cfg, d, vocab, max_len).eval()


def test_text_decoder_shapes():
    dec = text_decoder()
    assert dec(torch.randn(3, 8), torch.randint(0, 11, (3, 5))).shape == (3, 5, 11)
    assert dec(torch.randn(1, 8), torch.tensor([[4]])).shape == (1, 1, 11)


def test_text_decoder_length_overflow():
    dec = text_decoder(max_len=4)
    with pytest.raises(LengthOverflow):
        dec(torch.randn(1, 8), torch.zeros(1, 5, dtype=torch.long))


def test_causality_every_position():
    dec = text_decoder(layers=2)
    cls = torch.randn(2, 8)
    ids = torch.randint(0, 11, (2, 6))
    base = dec(cls, ids)
    for t in range(6):
        altered = ids.clone()
        altered[:, t:] = (altered[:, t:] + 3) % 11
        out = dec(cls, altered)
        # logits at positions <= t depend only on ids[:t]
        torch.testing.assert_close(out[:, : t + 1], base[:, : t + 1], rtol=0, atol=1e-6)


def test_two_position_oracle():
    dec = text_decoder(layers=1, heads=1, d=4, vocab=5, max_len=2)
    cls = torch.randn(1, 4)
    ids = torch.tensor([[3, 1]])
    logits = dec(cls, ids)[0].detach().numpy()

    emb = dec.token_embed.weight.detach().double().numpy()
    pos = dec.pos_embed[0].detach().double().numpy()
    x = np.stack([cls[0].double().numpy(), emb[3]]) + pos[:2]
    causal = np.tril(np.ones((2, 2), bool))
    x = np_prenorm_layer(x, weights_of(dec.layers[0]), allowed=causal)
    g, b = dec.norm.weight.detach().double().numpy(), dec.norm.bias.detach().double().numpy()
    h = np_layer_norm(x) * g + b
    expected = h @ dec.out.weight.detach().double().numpy().T + dec.out.bias.detach().double().numpy()
    np.testing.assert_allclose(logits, expected, rtol=1e-5, atol=1e-5)


def test_greedy_decode_stops_at_eos():
    dec = text_decoder(vocab=5, max_len=6)
    with torch.no_grad():
        dec.out.weight.zero_()
        dec.out.bias.copy_(torch.tensor([0.0, 0.0, 0.0, 5.0, 0.0]))
    out = dec.greedy_decode(torch.randn(2, 8), eos_id=3)
    assert out.tolist() == [[3], [3]]


def test_reconstruction_gradients_reach_encoders_and_fusion(toy_bundle, toy_batch):
    model = build_model(toy_bundle.cfg, 0)
    out = model(toy_batch)
    loss_img = reconstruction_image_loss(model.image_decoder(out.img_cls), toy_batch["image_target"])
    loss_img.backward(retain_graph=True)
    assert torch.count_nonzero(model.image_encoder.proj.weight.grad) > 0
    assert torch.count_nonzero(model.fusion.layers[0].linear1.weight.grad) > 0
    model.zero_grad()
    logits = model.text_decoder(out.txt_cls, toy_batch["token_ids"])
    reconstruction_text_loss(logits, toy_batch["token_ids"], toy_batch["token_mask"]).backward()
    assert torch.count_nonzero(model.text_encoder.proj.weight.grad) > 0
    assert torch.count_nonzero(model.text_encoder.backbone.blocks[1].linear1.weight.grad) > 0
    assert torch.count_nonzero(model.fusion.layers[0].linear1.weight.grad) > 0


def test_default_text_decoder_matches_tokenizer_length():
    cfg = RunConfig()
    assert cfg.encoder.max_tokens == 128
    dec = TextDecoder(cfg.decoder, 16, 50, cfg.encoder.max_tokens)
    assert dec.max_len == 128 and dec.pos_embed.shape[1] == 128
