# # Anchored imitation versus vanilla diffusion
#
# A vanilla diffusion planner starts every sample from pure noise around one
# zero anchor and regresses towards the average expert: its candidates pile up
# on one mode. Truncated diffusion from several anchors keeps one candidate per
# intention. Small networks and short schedules keep this to about a minute.

import time

from anchorgrpo.config import ILConfig, ModelConfig, VanillaConfig
from anchorgrpo.evaluation import evaluate
from anchorgrpo.imitation import build_generator, train_il
from anchorgrpo.scene import generate_dataset

train = generate_dataset(200, 1) + generate_dataset(200, 2, traffic="dense")
multi = generate_dataset(30, 77, mix=("multi_modal",))
il_cfg = ILConfig(steps=1500, batch_size=32)
model = ModelConfig(hidden=(96, 96))

t0 = time.time()
anchored = build_generator(train, model, seed=0)
curve = train_il(anchored, train, il_cfg, seed=0)
vanilla = build_generator(train, model, seed=0, vanilla_cfg=VanillaConfig())
train_il(vanilla, train, il_cfg, seed=0)
print(f"trained both in {time.time() - t0:.0f}s; anchored IL loss {curve[0]['total']:.2f} -> {curve[-1]['total']:.2f}")

# %%
for name, gen in (("vanilla", vanilla), ("anchored", anchored)):
    rep = evaluate(gen, multi, n_candidates=20, model=name)[0]
    print(f"{name:9s} diversity={rep.diversity:.3f} PDMS@1={rep.pdms_at[1]:.3f} "
          f"collision rate={rep.collision_rate:.3f}")
