"""Convert a tiktoken-format GPT-2 rank file into vocab.json + merges.txt.

The rank file (base64 token, rank per line) ships with several open-source
packages, e.g. openai-whisper's assets/gpt2.tiktoken.

usage: python export_gpt2_tokenizer.py gpt2.tiktoken OUT_DIR
"""
import base64
import json
import sys
from pathlib import Path


def bytes_to_unicode():
    bs = list(range(ord("!"), ord("~") + 1)) + list(range(ord("¡"), ord("¬") + 1)) + list(range(ord("®"), ord("ÿ") + 1))
    cs = bs[:]
    n = 0
    for b in range(256):
        if b not in bs:
            bs.append(b)
            cs.append(256 + n)
            n += 1
    return dict(zip(bs, map(chr, cs)))


def split_token(token: bytes, ranks: dict, max_rank: int):
    parts = [bytes([b]) for b in token]
    while True:
        best = None
        for i in range(len(parts) - 1):
            r = ranks.get(parts[i] + parts[i + 1])
            if r is not None and r < max_rank and (best is None or r < best[0]):
                best = (r, i)
        if best is None:
            break
        i = best[1]
        parts = parts[:i] + [parts[i] + parts[i + 1]] + parts[i + 2:]
    return parts


def main():
    src, out = Path(sys.argv[1]), Path(sys.argv[2])
    ranks = {}
    for line in src.read_text().splitlines():
        if line:
            tok, rank = line.split()
            ranks[base64.b64decode(tok)] = int(rank)
    enc = bytes_to_unicode()
    show = lambda b: "".join(enc[x] for x in b)
    vocab = {show(tok): rank for tok, rank in ranks.items()}
    vocab["<|endoftext|>"] = len(ranks)
    merges = []
    for tok, rank in sorted(ranks.items(), key=lambda kv: kv[1]):
        if len(tok) == 1:
            continue
        parts = split_token(tok, ranks, rank)
        assert len(parts) == 2, (tok, parts)
        merges.append(show(parts[0]) + " " + show(parts[1]))
    out.mkdir(parents=True, exist_ok=True)
    (out / "vocab.json").write_text(json.dumps(vocab, ensure_ascii=False))
    (out / "merges.txt").write_text("#version: 0.2\n" + "\n".join(merges) + "\n")
    print(len(vocab), "tokens,", len(merges), "merges")


if __name__ == "__main__":
    main()
