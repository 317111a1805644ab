"""Short contrastive pretraining on the tiny synthetic benchmark, with retrieval before and after.

Runs 20 of the profile's 60 epochs (about 15 s on one core).
"""

from siamav.config import tiny_profile
from siamav.data import SyntheticDataset
from siamav.eval import evaluate_retrieval
from siamav.model import SiameseAV
from siamav.train import pretrain_epoch

cfg = tiny_profile()
ds = SyntheticDataset(cfg.data, cfg.model.image_size, cfg.model.audio_size)
model = SiameseAV(cfg.model, seed=0)
optim = cfg.train.optimizer(cfg.train.pretrain.lr)


def show(tag):
    r = evaluate_retrieval(model, ds, "train", ks=(1, 5))
    print(f"{tag}: A->V R@1 {r['a2v']['R@1']:.3f} R@5 {r['a2v']['R@5']:.3f} | V->A R@1 {r['v2a']['R@1']:.3f}")


show("untrained")
for epoch in range(20):
    rep = pretrain_epoch(model, ds, optim, cfg.loss, cfg.mask.ratios, cfg.train.pretrain, epoch, 0, cfg.train.clip_norm)
    if epoch % 5 == 4:
        print(f"epoch {epoch + 1}: loss {rep['loss']:.3f} (contrastive {rep['contrastive']:.3f}, reconstruction {rep['reconstruction']:.3f})")
show("after 20 epochs")
