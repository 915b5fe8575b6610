#!/usr/bin/env python3
"""Convert a released CLIP checkpoint into a .rvw archive for `rave`.

Usage:
  convert_clip_weights.py --checkpoint ViT-B-32.pt --out weights/vit-b-32.rvw

The checkpoint may be the OpenAI TorchScript file or a plain state_dict with
the same parameter names. The BPE vocabulary is rebuilt from the merges file
(bpe_simple_vocab_16e6.txt.gz) shipped with the `clip` package, or given
with --bpe.
"""

import argparse
import gzip
import os
import sys

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))
import rvw  # noqa: E402


def bytes_to_unicode():
    bs = list(range(ord("!"), ord("~") + 1)) + list(range(ord("¡"), ord("¬") + 1)) + list(range(ord("®"), ord("ÿ") + 1))
    cs = bs[:]
    n = 0
    for b in range(256):
        if b not in bs:
            bs.append(b)
            cs.append(256 + n)
            n += 1
    return [chr(c) for c in cs]


def clip_vocabulary(bpe_path):
    merges = gzip.open(bpe_path).read().decode("utf-8").split("\n")
    merges = merges[1:49152 - 256 - 2 + 1]
    merges = [tuple(m.split()) for m in merges]
    vocab = bytes_to_unicode()
    vocab = vocab + [v + "</w>" for v in vocab]
    vocab.extend("".join(m) for m in merges)
    vocab.extend(["<|startoftext|>", "<|endoftext|>"])
    return vocab


def find_bpe(explicit):
    if explicit:
        return explicit
    try:
        import clip  # type: ignore

        return os.path.join(os.path.dirname(clip.__file__), "bpe_simple_vocab_16e6.txt.gz")
    except ImportError:
        pass
    try:
        import open_clip  # type: ignore

        return os.path.join(os.path.dirname(open_clip.__file__), "bpe_simple_vocab_16e6.txt.gz")
    except ImportError:
        sys.exit("no BPE merges file found; pass --bpe")


def load_state_dict(path):
    import torch

    try:
        model = torch.jit.load(path, map_location="cpu")
        return model.state_dict()
    except RuntimeError:
        sd = torch.load(path, map_location="cpu")
        return sd.get("state_dict", sd)


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--checkpoint", required=True)
    ap.add_argument("--out", required=True)
    ap.add_argument("--bpe")
    ap.add_argument("--model-id", default="vit-b-32")
    args = ap.parse_args()

    sd = load_state_dict(args.checkpoint)
    skip = {"input_resolution", "context_length", "vocab_size", "logit_scale"}
    tensors = [(k, v.detach().float().numpy()) for k, v in sd.items() if k not in skip]
    vision_width = sd["visual.conv1.weight"].shape[0]
    text_width = sd["ln_final.weight"].shape[0]
    metadata = {
        "model_id": args.model_id,
        "vision_heads": vision_width // 64,
        "text_heads": text_width // 64,
        "source": os.path.basename(args.checkpoint),
    }
    vocab = clip_vocabulary(find_bpe(args.bpe))
    if len(vocab) != sd["token_embedding.weight"].shape[0]:
        sys.exit(f"vocabulary size {len(vocab)} does not match token_embedding rows")
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    digest = rvw.write(args.out, tensors, metadata, [("vocab", vocab)])
    print(f"wrote {args.out}\nsha256 {digest}")


if __name__ == "__main__":
    main()
