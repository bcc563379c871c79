#!/usr/bin/env python3
"""Reference KV-retrieval generator, written from docs/kv_retrieval.md.

Froze the fixtures in tests/data. `--check DIR` regenerates each of them and
fails on any difference:

    python3 tests/oracles/kv_reference.py --seed 7 --n-items 4 --n-pairs 2 --format mc
    python3 tests/oracles/kv_reference.py --check tests/data
"""
import argparse
import json
import sys

MASK = (1 << 64) - 1
ALPHABET = "abcdefghijklmnopqrstuvwxyz0123456789"


class SplitMix64:
    def __init__(self, seed):
        self.state = seed & MASK

    def next(self):
        self.state = (self.state + 0x9E3779B97F4A7C15) & MASK
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK
        return z ^ (z >> 31)

    def below(self, n):
        return self.next() % n


def distinct(rng, count, length):
    out = []
    while len(out) < count:
        s = "".join(ALPHABET[rng.below(36)] for _ in range(length))
        if s not in out:
            out.append(s)
    return out


def generate(seed, n_items, n_pairs, key_len, value_len, fmt, n_choices):
    if not n_choices:
        n_choices = min(4, n_pairs)
    rng = SplitMix64(seed)
    items = []
    for i in range(n_items):
        keys = distinct(rng, n_pairs, key_len)
        values = distinct(rng, n_pairs, value_len)
        q = rng.below(n_pairs)
        context = "".join(f"{k}: {v}\n" for k, v in zip(keys, values))
        context += f"Q: {keys[q]}?\nA:"
        item = {"id": f"kv-{seed}-{i}", "context": context}
        if fmt == "mc":
            others = [p for p in range(n_pairs) if p != q]
            for j in range(n_choices - 1):
                r = j + rng.below(len(others) - j)
                others[j], others[r] = others[r], others[j]
            distractors = others[: n_choices - 1]
            g = rng.below(n_choices)
            order = distractors[:g] + [q] + distractors[g:]
            item["choices"] = [" " + values[p] for p in order]
            item["gold"] = g
        else:
            item["gold"] = values[q]
        items.append(item)
    return items


FIXTURES = {
    "kv_seed7_mc.jsonl": dict(seed=7, n_items=4, n_pairs=2, key_len=6, value_len=6, fmt="mc", n_choices=0),
    "kv_seed7_gen.jsonl": dict(seed=7, n_items=3, n_pairs=5, key_len=6, value_len=6, fmt="generation", n_choices=0),
    "kv_seed11_mc.jsonl": dict(seed=11, n_items=5, n_pairs=8, key_len=3, value_len=2, fmt="mc", n_choices=3),
}


def render(items):
    return "".join(json.dumps(item, separators=(",", ":"), ensure_ascii=False) + "\n" for item in items)


def check(directory):
    bad = 0
    for name, cfg in FIXTURES.items():
        with open(f"{directory}/{name}", encoding="utf-8") as f:
            frozen = f.read()
        ok = render(generate(**cfg)) == frozen
        print(f"{'ok' if ok else 'MISMATCH'} {name}")
        bad += not ok
    return 1 if bad else 0


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--check", metavar="DIR")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--n-items", type=int, default=100)
    ap.add_argument("--n-pairs", type=int, default=32)
    ap.add_argument("--key-len", type=int, default=6)
    ap.add_argument("--value-len", type=int, default=6)
    ap.add_argument("--format", default="mc")
    ap.add_argument("--n-choices", type=int, default=0)
    a = ap.parse_args()
    if a.check:
        sys.exit(check(a.check))
    sys.stdout.write(render(generate(a.seed, a.n_items, a.n_pairs, a.key_len, a.value_len, a.format, a.n_choices)))


if __name__ == "__main__":
    main()
