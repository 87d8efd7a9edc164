# # Coarse-to-fine selection
#
# The selector scores candidates after generation. A coarse scorer keeps the
# top half, a fine scorer picks one. Both train on the generator's own
# candidates plus two noisy copies each, labelled by the simulator.
#
# With the default budget (20 epochs) and a few hundred scenes the selector
# still trails the generator's own score head, which saw far more updates.
# Raising `epochs` narrows the gap.

from anchorgrpo.config import ILConfig, ModelConfig, SelectorConfig
from anchorgrpo.evaluation import evaluate
from anchorgrpo.imitation import build_generator, train_il
from anchorgrpo.scene import generate_dataset
from anchorgrpo.selector import build_selector_data, train_selector

train = generate_dataset(150, 1) + generate_dataset(150, 2, traffic="dense")
test = generate_dataset(40, 99, traffic="dense")

gen = build_generator(train, ModelConfig(hidden=(96, 96)), seed=0)
train_il(gen, train, ILConfig(steps=1500), seed=0)

# both designs see the same augmented candidates
data = build_selector_data(gen, train, SelectorConfig(), seed=0)
print(f"{len(data)} training scenes, {len(data[0][1])} candidates each")

for label, c2f in (("coarse-to-fine + rank", True), ("single stage BCE", False)):
    cfg = SelectorConfig(coarse_to_fine=c2f, rank_loss=c2f)
    nets, curve = train_selector(gen, train, cfg, seed=0, data=data)
    by_logits, by_selector = evaluate(gen, test, selector=nets)
    print(f"{label:22s} selected PDMS={by_selector.pdms_selected:.3f} "
          f"(ranked by generator logits {by_logits.pdms_selected:.3f})")
