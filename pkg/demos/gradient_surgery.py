"""
Projecting conflicting gradients
================================

When the recommendation gradient on a tokenizer tensor points against the
tokenization gradient, its conflicting component is removed before the
update.  Non-conflicting gradients pass through untouched.
"""
import numpy as np

from bilevel_genrec.trainer import conflict_rate, gradient_surgery, project_conflict

g_rec, g_token = np.array([1.0, -2.0]), np.array([1.0, 1.0])
projected, fired = project_conflict(g_rec, g_token)
print("projected:", projected, " fired:", fired, " dot after:", projected @ g_token)  # [1.5 -1.5]

# %%
# Anti-parallel gradients cancel completely; aligned ones are left alone.
print(project_conflict(-g_token, g_token)[0], project_conflict(2 * g_token, g_token)[0])

# %%
# Surgery is applied per named tensor; the conflict rate counts projected tensors.
rng = np.random.default_rng(0)
rec = {f"layer{i}": rng.normal(size=4) for i in range(6)}
token = {f"layer{i}": rng.normal(size=4) for i in range(6)}
adjusted, names = gradient_surgery(rec, token)
print("projected tensors:", names, " conflict rate:", conflict_rate(rec, token))
for name in names:
    assert adjusted[name] @ token[name] >= -1e-12
