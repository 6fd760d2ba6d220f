"""Writes a tiny random GPT-2 checkpoint plus reference outputs computed by the
Hugging Face implementation. Used by the C++ tests as an independent oracle."""
import json
import sys
from pathlib import Path

import torch
from transformers import GPT2Config, GPT2LMHeadModel

out = Path(sys.argv[1] if len(sys.argv) > 1 else "tests/fixtures/hf_tiny")
out.mkdir(parents=True, exist_ok=True)
torch.manual_seed(7)
cfg = GPT2Config(vocab_size=96, n_positions=16, n_embd=8, n_layer=2, n_head=2,
                 n_inner=32, activation_function="gelu_new", resid_pdrop=0.0,
                 embd_pdrop=0.0, attn_pdrop=0.0, layer_norm_epsilon=1e-5)
model = GPT2LMHeadModel(cfg).double().eval()
with torch.no_grad():
    for name, p in model.named_parameters():
        if "ln" in name and name.endswith("weight"):
            p.copy_(1.0 + 0.1 * torch.randn_like(p))
        elif "ln" in name:
            p.copy_(0.1 * torch.randn_like(p))
        elif "wte" in name:
            p.copy_(torch.randn_like(p))
        else:
            p.copy_(0.3 * torch.randn_like(p))
model = model.float()
model.save_pretrained(out, safe_serialization=True)
model = model.double()  # oracle runs in double on the stored fp32 weights
(out / "generation_config.json").unlink(missing_ok=True)

tokens = [5, 17, 42, 3, 88, 60, 1, 29, 71]
ids = torch.tensor([tokens])
with torch.no_grad():
    logits = model(ids).logits[0]
emb = model.transformer.wte(ids).detach().requires_grad_(True)
h = model.transformer(inputs_embeds=emb).last_hidden_state  # adds wpe internally
final = model.lm_head(h)[0, -1]
metric = final[11] - final[23]
metric.backward()
ref = {
    "tokens": tokens,
    "logits": logits.tolist(),
    "metric_positive": [11],
    "metric_negative": [23],
    "metric": metric.item(),
    "embed_grad": emb.grad[0].tolist(),
}
(out / "reference.json").write_text(json.dumps(ref))
print("wrote", out)
