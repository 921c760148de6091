"""Builds the offline test fixtures under crates/core/tests/fixtures.

    python3 tools/fixtures/make_fixtures.py [--reuse-model DIR] [--steps N]

Steps:
  1. Generate the synthetic world, its pretraining corpus and a byte-level
     BPE tokenizer.
  2. Pretrain a small GPT-NeoX model with HF transformers (or reuse a
     checkpoint produced by an earlier run with the same settings).
  3. Write CoNLL train/test files, the relation dataset and a frequency table.
  4. Freeze oracle values computed with independent reference
     implementations: HF transformers forward passes and input gradients,
     sacrebleu chrF, tokenizer offsets for span alignment, scipy Spearman,
     torch Adam.

Requires: torch, transformers, tokenizers, sacrebleu, scipy, safetensors.
"""

import argparse
import json
import os
import random
import shutil
import sys
import time

import torch

HERE = os.path.dirname(os.path.abspath(__file__))
sys.path.insert(0, HERE)
from world import World, detok, mention_counts, relation_dataset, write_conll  # noqa: E402

OUT = os.path.join(HERE, "..", "..", "crates", "core", "tests", "fixtures")

WORLD_SEED = 7
N_DOCS = 30000
VOCAB = 1024
N_TRAIN_SENT = 600
N_TEST_SENT = 300


def build_corpus_and_tokenizer(workdir):
    from tokenizers import ByteLevelBPETokenizer

    w = World(WORLD_SEED)
    docs = [w.document() for _ in range(N_DOCS)]
    corpus_path = os.path.join(workdir, "corpus.txt")
    with open(corpus_path, "w") as f:
        f.write("\n".join(docs))
    tok = ByteLevelBPETokenizer()
    tok.train([corpus_path], vocab_size=VOCAB, min_frequency=2, special_tokens=["<|endoftext|>"])
    tok_path = os.path.join(workdir, "tokenizer.json")
    tok.save(tok_path)
    return w, docs, tok_path


def pretrain(docs, tok_path, hidden, layers, steps, out_dir):
    from tokenizers import Tokenizer
    from transformers import GPTNeoXConfig, GPTNeoXForCausalLM

    torch.manual_seed(0)
    torch.set_num_threads(1)
    tok = Tokenizer.from_file(tok_path)
    ids = []
    for d in docs:
        ids += tok.encode(d).ids + [0]
    data = torch.tensor(ids)
    cfg = GPTNeoXConfig(
        vocab_size=VOCAB, hidden_size=hidden, num_hidden_layers=layers,
        num_attention_heads=4, intermediate_size=4 * hidden, rotary_pct=0.25,
        max_position_embeddings=128, use_parallel_residual=True,
        tie_word_embeddings=False, bos_token_id=0, eos_token_id=0, hidden_act="gelu",
    )
    m = GPTNeoXForCausalLM(cfg)
    opt = torch.optim.AdamW(m.parameters(), lr=2e-3, weight_decay=0.01)
    T, B = 64, 32
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=2e-3, total_steps=steps, pct_start=0.05)
    t0 = time.time()
    for s in range(steps):
        ix = torch.randint(0, len(data) - T - 1, (B,))
        x = torch.stack([data[i:i + T] for i in ix])
        out = m(input_ids=x, labels=x)
        opt.zero_grad()
        out.loss.backward()
        opt.step()
        sched.step()
        if s % 200 == 0:
            print(s, out.loss.item(), time.time() - t0, flush=True)
    m.save_pretrained(out_dir, safe_serialization=True)


def install_model(src_dir, tok_path, dst):
    os.makedirs(dst, exist_ok=True)
    for name in ["config.json", "model.safetensors"]:
        shutil.copy(os.path.join(src_dir, name), os.path.join(dst, name))
    shutil.copy(tok_path, os.path.join(dst, "tokenizer.json"))


def conll_files(world):
    train = [world.conll_sentence() for _ in range(N_TRAIN_SENT)]
    test = [world.conll_sentence() for _ in range(N_TEST_SENT)]
    os.makedirs(os.path.join(OUT, "conll"), exist_ok=True)
    write_conll(os.path.join(OUT, "conll", "train.txt"), train)
    write_conll(os.path.join(OUT, "conll", "test.txt"), test)
    return train, test


def mentions_of(sentences):
    out = []
    for rows in sentences:
        cur = []
        for word, _, _, tag in rows:
            if tag.startswith("B-"):
                if cur:
                    out.append(" ".join(cur))
                cur = [word]
            elif tag.startswith("I-"):
                cur.append(word)
            else:
                if cur:
                    out.append(" ".join(cur))
                cur = []
        if cur:
            out.append(" ".join(cur))
    return out


def trimmed_offsets(text, offsets):
    out = []
    for a, b in offsets:
        while a < b and text[a].isspace():
            a += 1
        while b > a and text[b - 1].isspace():
            b -= 1
        out.append((a, b))
    return out


def alignment_oracle(tok, sentences, n_sent=25, max_words=4):
    """Every contiguous span of up to `max_words` words in the first
    `n_sent` sentences, with the expected inclusive token span or null."""
    cases = []
    for rows in sentences[:n_sent]:
        words = [r[0] for r in rows]
        text = " ".join(words)
        starts = []
        pos = 0
        for wd in words:
            starts.append(pos)
            pos += len(wd) + 1
        offs = trimmed_offsets(text, tok.encode(text).offsets)
        for i in range(len(words)):
            for j in range(i, min(len(words), i + max_words)):
                s, e = starts[i], starts[j] + len(words[j])
                cover = [k for k, (a, b) in enumerate(offs) if a < b and a < e and b > s]
                span = None
                if cover and offs[cover[0]][0] == s and offs[cover[-1]][1] == e:
                    span = [cover[0], cover[-1]]
                cases.append({"text": text, "char_span": [s, e], "token_span": span})
    return cases


def forward_oracle(model, tok, texts):
    out = []
    with torch.no_grad():
        for t in texts:
            ids = tok.encode(t).ids
            res = model(input_ids=torch.tensor([ids]), output_hidden_states=True)
            hidden = [h[0, -1].tolist() for h in res.hidden_states]
            gen = list(ids)
            for _ in range(10):
                nxt = model(input_ids=torch.tensor([gen])).logits[0, -1].argmax().item()
                gen.append(nxt)
            out.append({
                "text": t,
                "ids": ids,
                "offsets": trimmed_offsets(t, tok.encode(t).offsets),
                "logits_last": res.logits[0, -1].tolist(),
                "hidden_last": hidden,
                "greedy10": gen[len(ids):],
            })
    return out


def gradient_oracle(model, tok, text, mention, layer):
    """Teacher-forced loss of `[ctx, z, theta, gold[:-1]]` and its gradient
    with respect to z and theta."""
    g = torch.Generator().manual_seed(3)
    emb = model.gpt_neox.embed_in.weight
    d = emb.shape[1]
    ctx_ids = tok.encode(text).ids
    with torch.no_grad():
        hs = model(input_ids=torch.tensor([ctx_ids]), output_hidden_states=True).hidden_states
    z = hs[layer][0, -1].clone().requires_grad_(True)
    theta = (emb.mean(0).detach() + 0.02 * torch.randn(d, generator=g)).requires_grad_(True)
    gold = tok.encode(" " + mention).ids + [0]
    cases = []
    for contextual in [False, True]:
        z.grad = None
        theta.grad = None
        parts = []
        if contextual:
            parts.append(emb[ctx_ids].detach())
        parts += [z[None], theta[None], emb[gold[:-1]].detach()]
        x = torch.cat(parts)
        logits = model(inputs_embeds=x[None]).logits[0]
        loss = torch.nn.functional.cross_entropy(logits[-len(gold):], torch.tensor(gold))
        loss.backward()
        cases.append({
            "contextual": contextual,
            "context_ids": ctx_ids if contextual else [],
            "z": z.detach().tolist(),
            "theta": theta.detach().tolist(),
            "gold": gold,
            "loss": loss.item(),
            "grad_z": z.grad.tolist(),
            "grad_theta": theta.grad.tolist(),
        })
    return cases


def chrf_oracle(n=1000):
    from sacrebleu.metrics import CHRF

    metric = CHRF(char_order=6, word_order=0, beta=3)
    rng = random.Random(5)
    alphabet = "abcdefgh ABC-'.é"
    words = ["Paris", "Kohl", "Helmut", "New", "York", "Bonn", "Eiffel", "Tower", "FC", "United"]
    pairs = []
    for i in range(n):
        if i % 3 == 0:
            a = " ".join(rng.choice(words) for _ in range(rng.randint(1, 3)))
            b = " ".join(rng.choice(words) for _ in range(rng.randint(1, 3)))
        else:
            a = "".join(rng.choice(alphabet) for _ in range(rng.randint(0, 14)))
            b = "".join(rng.choice(alphabet) for _ in range(rng.randint(0, 14)))
        pairs.append((a, b))
    pairs += [("Gaston", "Gaston"), ("Geston", "Gaston"), ("Paris", "Paris"), ("", "Paris")]
    out = []
    for pred, gold in pairs:
        score = metric.sentence_score(pred, [gold]).score / 100.0
        out.append({"pred": pred, "gold": gold, "chrf": score})
    return out


def spearman_oracle():
    from scipy.stats import spearmanr

    rng = random.Random(9)
    cases = []
    for _ in range(40):
        n = rng.randint(3, 10)
        x = [rng.choice([0.0, 0.1, 0.2, 0.3, 0.5, 0.7]) for _ in range(n)]
        y = [rng.choice([0.0, 0.25, 0.5, 1.0]) for _ in range(n)]
        r = spearmanr(x, y).statistic
        cases.append({"x": x, "y": y, "rho": None if r != r else float(r)})
    return cases


def adam_oracle():
    torch.manual_seed(1)
    target = torch.randn(6)
    p = torch.zeros(6, requires_grad=True)
    opt = torch.optim.Adam([p], lr=0.05)
    traj = []
    for _ in range(25):
        loss = ((p - target) ** 2).sum()
        opt.zero_grad()
        loss.backward()
        grad = p.grad.tolist()
        opt.step()
        traj.append({"grad": grad, "param": p.detach().tolist()})
    return {"lr": 0.05, "target": target.tolist(), "steps": traj}


def dump(name, obj):
    path = os.path.join(OUT, "oracles", name)
    os.makedirs(os.path.dirname(path), exist_ok=True)
    with open(path, "w") as f:
        json.dump(obj, f)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--reuse-model", help="directory with config.json and model.safetensors")
    ap.add_argument("--hidden", type=int, default=256)
    ap.add_argument("--layers", type=int, default=4)
    ap.add_argument("--steps", type=int, default=5000)
    ap.add_argument("--workdir", default="/tmp/entlens-fixtures")
    args = ap.parse_args()
    os.makedirs(args.workdir, exist_ok=True)

    world, docs, tok_path = build_corpus_and_tokenizer(args.workdir)
    model_src = args.reuse_model
    if model_src is None:
        model_src = os.path.join(args.workdir, "model")
        pretrain(docs, tok_path, args.hidden, args.layers, args.steps, model_src)
    model_dir = os.path.join(OUT, "model")
    install_model(model_src, tok_path, model_dir)

    train, test = conll_files(world)

    os.makedirs(os.path.join(OUT, "relations"), exist_ok=True)
    with open(os.path.join(OUT, "relations", "landmark_in_country.json"), "w") as f:
        json.dump(relation_dataset(world), f, indent=1)

    mentions = sorted(set(mentions_of(train) + mentions_of(test)))
    counts = mention_counts(docs, mentions)
    with open(os.path.join(OUT, "counts.tsv"), "w") as f:
        for m in mentions:
            f.write(f"{m}\t{counts[m]}\n")

    from tokenizers import Tokenizer
    from transformers import GPTNeoXForCausalLM

    tok = Tokenizer.from_file(tok_path)
    model = GPTNeoXForCausalLM.from_pretrained(model_dir).eval()
    torch.set_num_threads(1)

    texts = [" ".join(r[0] for r in rows) for rows in test[:6]]
    texts += ["The Eiffel Tower is located in", "Helmut"]
    dump("hf_forward.json", forward_oracle(model, tok, texts))
    dump("input_grad.json", gradient_oracle(model, tok, texts[0], mentions_of(test[:1])[0], args.layers // 2))
    dump("alignment.json", alignment_oracle(tok, test))
    dump("chrf.json", chrf_oracle())
    dump("spearman.json", spearman_oracle())
    dump("adam.json", adam_oracle())
    print("fixtures written to", os.path.normpath(OUT))


if __name__ == "__main__":
    main()
