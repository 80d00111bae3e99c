"""Regenerates the tiny reference models used by the tower parity tests.

Needs torch, safetensors and open_clip. Run from this directory:

    python3 gen_fixtures.py
"""

import torch
from open_clip.model import CLIP, CLIPTextCfg, CLIPVisionCfg
from safetensors.torch import save_file

EMBED = 32
CONTEXT = 16
VOCAB = 512
IDS = [
    [VOCAB - 2, 17, 250, 3, 88, VOCAB - 1],
    [VOCAB - 2, 401, VOCAB - 1],
]


def build(vision_cfg, seed):
    torch.manual_seed(seed)
    text_cfg = CLIPTextCfg(context_length=CONTEXT, vocab_size=VOCAB, width=64, heads=1, layers=2)
    model = CLIP(EMBED, vision_cfg, text_cfg, quick_gelu=True)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name == "logit_scale":
                continue
            p.add_(0.05 * torch.randn_like(p))
        for name, b in model.named_buffers():
            if name.endswith("running_mean"):
                b.copy_(0.1 * torch.randn_like(b))
            elif name.endswith("running_var"):
                b.copy_(0.5 + torch.rand_like(b))
    return model.eval()


def padded_ids():
    out = torch.zeros(len(IDS), CONTEXT, dtype=torch.long)
    for i, row in enumerate(IDS):
        out[i, : len(row)] = torch.tensor(row)
    return out


def patch_last_attention(model, sink):
    block = model.visual.transformer.resblocks[-1]
    attn = block.attn

    def attention(q_x, k_x=None, v_x=None, attn_mask=None):
        n, length, width = q_x.shape
        heads = attn.num_heads
        dh = width // heads
        qkv = q_x @ attn.in_proj_weight.T + attn.in_proj_bias
        q, k, v = (t.view(n, length, heads, dh).transpose(1, 2) for t in qkv.chunk(3, dim=-1))
        probs = ((q * dh**-0.5) @ k.transpose(-1, -2)).softmax(-1)
        if probs.requires_grad:
            probs.retain_grad()
        sink["target"] = probs
        mixed = (probs @ v).transpose(1, 2).reshape(n, length, width)
        return attn.out_proj(mixed)

    block.attention = attention


def hook_layer4(model, sink):
    def hook(_module, _inputs, output):
        output.retain_grad()
        sink["target"] = output

    model.visual.layer4.register_forward_hook(hook)


def export(model, stem, half_weights, res):
    state = {k: v.detach().clone().contiguous() for k, v in model.state_dict().items()}
    state = {k: v for k, v in state.items() if k != "attn_mask"}
    if half_weights:
        stored = {k: v.half() if v.is_floating_point() else v for k, v in state.items()}
        reference = {k: v.float() if v.is_floating_point() else v for k, v in stored.items()}
    else:
        stored = state
        reference = state
    model.load_state_dict(reference, strict=False)
    model = model.double()

    sink = {}
    if hasattr(model.visual, "layer4"):
        hook_layer4(model, sink)
    else:
        with torch.no_grad():
            x = torch.randn(1, 3, res, res, dtype=torch.float64)
            before = model.encode_image(x)
        patch_last_attention(model, sink)
        with torch.no_grad():
            after = model.encode_image(x)
        assert torch.allclose(before, after, atol=1e-10)

    gen = torch.Generator().manual_seed(7)
    pixels = torch.randn(1, 3, res, res, generator=gen).double()
    ids = padded_ids()
    with torch.no_grad():
        text = model.encode_text(ids)
    image = model.encode_image(pixels)
    score = torch.nn.functional.cosine_similarity(image, text[:1].detach()).sum()
    score.backward()
    target = sink["target"]

    save_file(stored, f"{stem}.safetensors")
    expected = {
        "pixels": pixels[0],
        "ids": ids.double(),
        "image_embedding": image[0].detach(),
        "text_embeddings": text,
        "target": target[0].detach(),
        "target_grad": target.grad[0],
        "score": score.detach().reshape(()),
    }
    save_file({k: v.contiguous() for k, v in expected.items()}, f"{stem}_expected.safetensors")


if __name__ == "__main__":
    resnet = CLIPVisionCfg(layers=(1, 1, 1, 1), width=8, image_size=64, head_width=64)
    export(build(resnet, 0), "tiny_resnet", half_weights=False, res=64)
    vit = CLIPVisionCfg(layers=2, width=128, patch_size=8, image_size=32, head_width=64)
    export(build(vit, 1), "tiny_vit", half_weights=True, res=32)
