"""Cross-checks the C++ CLIP adapter against torch on random tiny weights.

Builds the reference forward pass with torch.nn.MultiheadAttention, writes
the weights as a .rvw archive, runs clip_embed_dump and compares. Exits 77
(skipped) when torch is unavailable.
"""

import os
import struct
import subprocess
import sys
import tempfile

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(os.path.abspath(__file__)), "..", "tools"))
import rvw  # noqa: E402

try:
    import torch
    import torch.nn.functional as F
except ImportError:
    print("torch not available")
    sys.exit(77)

torch.manual_seed(0)
torch.set_default_dtype(torch.float64)

IMAGE, PATCH, VW, VL, VH, EMB = 32, 8, 32, 2, 4, 12
CTX, TW, TL, TH = 10, 16, 2, 2
VOCAB = [f"w{i}</w>" for i in range(12)] + ["<|startoftext|>", "<|endoftext|>"]
MEAN = torch.tensor([0.48145466, 0.4578275, 0.40821073]).view(3, 1, 1)
STD = torch.tensor([0.26862954, 0.26130258, 0.27577711]).view(3, 1, 1)


def rnd(*shape, s=0.3):
    return (torch.randn(*shape) * s).float().double()


def block_params(prefix, w):
    return {
        prefix + "ln_1.weight": 1 + rnd(w, s=0.1), prefix + "ln_1.bias": rnd(w, s=0.1),
        prefix + "attn.in_proj_weight": rnd(3 * w, w), prefix + "attn.in_proj_bias": rnd(3 * w, s=0.1),
        prefix + "attn.out_proj.weight": rnd(w, w), prefix + "attn.out_proj.bias": rnd(w, s=0.1),
        prefix + "ln_2.weight": 1 + rnd(w, s=0.1), prefix + "ln_2.bias": rnd(w, s=0.1),
        prefix + "mlp.c_fc.weight": rnd(4 * w, w), prefix + "mlp.c_fc.bias": rnd(4 * w, s=0.1),
        prefix + "mlp.c_proj.weight": rnd(w, 4 * w), prefix + "mlp.c_proj.bias": rnd(w, s=0.1),
    }


sd = {
    "visual.conv1.weight": rnd(VW, 3, PATCH, PATCH, s=0.05),
    "visual.class_embedding": rnd(VW),
    "visual.positional_embedding": rnd((IMAGE // PATCH) ** 2 + 1, VW),
    "visual.ln_pre.weight": 1 + rnd(VW, s=0.1), "visual.ln_pre.bias": rnd(VW, s=0.1),
    "visual.ln_post.weight": 1 + rnd(VW, s=0.1), "visual.ln_post.bias": rnd(VW, s=0.1),
    "visual.proj": rnd(VW, EMB),
    "token_embedding.weight": rnd(len(VOCAB), TW, s=1.0),
    "positional_embedding": rnd(CTX, TW, s=0.1),
    "ln_final.weight": 1 + rnd(TW, s=0.1), "ln_final.bias": rnd(TW, s=0.1),
    "text_projection": rnd(TW, EMB),
}
for i in range(VL):
    sd.update(block_params(f"visual.transformer.resblocks.{i}.", VW))
for i in range(TL):
    sd.update(block_params(f"transformer.resblocks.{i}.", TW))


def resblock(x, prefix, heads, mask=None):
    w = x.shape[-1]
    mha = torch.nn.MultiheadAttention(w, heads)
    mha.in_proj_weight.data = sd[prefix + "attn.in_proj_weight"]
    mha.in_proj_bias.data = sd[prefix + "attn.in_proj_bias"]
    mha.out_proj.weight.data = sd[prefix + "attn.out_proj.weight"]
    mha.out_proj.bias.data = sd[prefix + "attn.out_proj.bias"]
    h = F.layer_norm(x, (w,), sd[prefix + "ln_1.weight"], sd[prefix + "ln_1.bias"])
    x = x + mha(h, h, h, need_weights=False, attn_mask=mask)[0]
    h = F.layer_norm(x, (w,), sd[prefix + "ln_2.weight"], sd[prefix + "ln_2.bias"])
    h = F.linear(h, sd[prefix + "mlp.c_fc.weight"], sd[prefix + "mlp.c_fc.bias"])
    h = h * torch.sigmoid(1.702 * h)
    return x + F.linear(h, sd[prefix + "mlp.c_proj.weight"], sd[prefix + "mlp.c_proj.bias"])


def encode_image(img):
    x = ((img - MEAN) / STD).unsqueeze(0)
    x = F.conv2d(x, sd["visual.conv1.weight"], stride=PATCH).flatten(2).transpose(1, 2)[0]
    x = torch.cat([sd["visual.class_embedding"].unsqueeze(0), x]) + sd["visual.positional_embedding"]
    x = F.layer_norm(x, (VW,), sd["visual.ln_pre.weight"], sd["visual.ln_pre.bias"]).unsqueeze(1)
    for i in range(VL):
        x = resblock(x, f"visual.transformer.resblocks.{i}.", VH)
    x = F.layer_norm(x[0, 0], (VW,), sd["visual.ln_post.weight"], sd["visual.ln_post.bias"])
    return x @ sd["visual.proj"]


def encode_text(ids):
    seq = [len(VOCAB) - 2] + ids + [len(VOCAB) - 1]
    ids_t = torch.zeros(CTX, dtype=torch.long)
    ids_t[: len(seq)] = torch.tensor(seq)
    x = sd["token_embedding.weight"][ids_t] + sd["positional_embedding"]
    mask = torch.full((CTX, CTX), float("-inf")).triu(1)
    x = x.unsqueeze(1)
    for i in range(TL):
        x = resblock(x, f"transformer.resblocks.{i}.", TH, mask)
    x = F.layer_norm(x[:, 0], (TW,), sd["ln_final.weight"], sd["ln_final.bias"])
    return x[ids_t.argmax()] @ sd["text_projection"]


def main():
    dump = sys.argv[1]
    img = torch.rand(3, IMAGE, IMAGE).float().double()
    ids = [3, 7, 1]
    with tempfile.TemporaryDirectory() as tmp:
        weights = os.path.join(tmp, "tiny.rvw")
        rvw.write(weights, [(k, v.numpy()) for k, v in sd.items()],
                  {"vision_heads": VH, "text_heads": TH}, [("vocab", VOCAB)])
        image_path = os.path.join(tmp, "image.f32")
        with open(image_path, "wb") as f:
            f.write(struct.pack("<II", IMAGE, IMAGE) + img.numpy().astype("<f4").tobytes())
        out = subprocess.run([dump, weights, image_path] + [str(i) for i in ids],
                             check=True, capture_output=True, text=True).stdout
    got = {line.split()[0]: np.array([float(v) for v in line.split()[1:]]) for line in out.splitlines()}
    with torch.no_grad():
        want = {"image": encode_image(img).numpy(), "text": encode_text(ids).numpy()}
    ok = True
    for key in ("image", "text"):
        err = np.abs(got[key] - want[key]).max() / max(np.abs(want[key]).max(), 1e-12)
        print(f"{key}: max relative error {err:.3e}")
        ok &= err < 1e-5
    sys.exit(0 if ok else 1)


if __name__ == "__main__":
    main()
