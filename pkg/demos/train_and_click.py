"""Train a small promptable segmenter on synthetic shapes and score it.

Walks through the whole pipeline in-process: generate scenes, distill an
encoder from a frozen teacher, fine-tune end to end on prompts, then run
the click and box protocols. Takes about four minutes on one CPU core.

    python demos/train_and_click.py
"""
import numpy as np

from evsam.attention import AttentionConfig
from evsam.backbone import PRESETS, ImageEncoder
from evsam.data.dataset import gen_dataset
from evsam.evaluation import box_eval, click_eval
from evsam.nn.tensor import Tensor
from evsam.sam_head import Predictor, SamModel
from evsam.training import TrainConfig, distill_loop, embedding_cosine, train_loop

cfg = PRESETS["desk-l0"]
attn = AttentionConfig(scales=(3,))
scenes = gen_dataset(1, 12, cfg.input_size, 2)
print(f"{len(scenes)} scenes, {sum(len(s.instances) for s in scenes)} masks at {cfg.input_size} px")

# distillation: match a frozen teacher's embeddings under L2
model = SamModel(cfg, attn, seed=0)
teacher = ImageEncoder(cfg, attn, seed=1).freeze()
images = [s.image for s in scenes]
res = distill_loop(model.image_encoder, teacher, images, TrainConfig(batch_size=4, weight_decay=0.0), steps=200)
cos = np.mean([embedding_cosine(model.image_encoder(Tensor(i)).data, teacher(Tensor(i)).data) for i in images])
print(f"distill: l2 {res.trace[0]['l2']:.4f} -> {res.trace[-1]['l2']:.4f}, cosine to teacher {cos:.3f}")

# end-to-end phase on the same scenes, so this measures fit rather than generalisation
res = train_loop(model, scenes, TrainConfig(epochs=150, batch_size=4, hflip_prob=0.0))
print(f"train: {res.steps} steps, loss {res.trace[0]['total']:.3f} -> {res.trace[-1]['total']:.3f}")

pred = Predictor(model)
clicks = click_eval(pred, scenes, cfg.input_size)
print("click mIoU:", {k: round(v, 3) for k, v in clicks.miou.items()})
boxes = box_eval(pred, scenes, cfg.input_size)
sizes = {b: round(v, 3) for b, v in boxes.buckets.items() if v is not None}
print(f"box mIoU: {boxes.miou:.3f}  by size: {sizes}")
