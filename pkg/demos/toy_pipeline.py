"""The full experiment on the synthetic corpus, about eight minutes on one core.

1. Train a four-layer teacher on both tasks (the stand-in for pre-training).
2. Distill it into a two-layer student through prediction heads on layers 2, 3, 4.
3. Fine-tune copies of the student four ways: multi-task full, multi-task with
   the encoder frozen, keywords only, speakers only.
4. Report keyword accuracy and speaker EER on held-out utterances.
"""
import sys
import time

from distilsrl.config import resolve_config
from distilsrl.heads import KWS, SV
from distilsrl.pipeline import clone_model, distill_student, evaluate, finetune, synthetic_splits, train_teacher

cfg = resolve_config(sys.argv[1] if len(sys.argv) > 1 else None, {})
start = time.perf_counter()


def stamp(msg):
    print(f"[{time.perf_counter() - start:6.0f} s] {msg}", flush=True)


train, test = synthetic_splits(cfg)
stamp(f"corpus: {len(train.waves)} train / {len(test.waves)} test utterances")
teacher = train_teacher(cfg, train)
stamp("teacher trained")
distilled = distill_student(cfg, teacher.model, train.waves)
stamp(f"student distilled, final loss {distilled.trace[-1].total:.3f}" if distilled.trace else "student copied")

rows = [("teacher", evaluate(cfg, teacher.model, teacher.heads, test))]
for tag, tasks, freeze in (("multi-task full", (KWS, SV), False), ("multi-task frozen", (KWS, SV), True),
                           ("keywords only", (KWS,), False), ("speakers only", (SV,), False)):
    res = finetune(cfg, clone_model(distilled.student), train, tasks, freeze=freeze)
    rows.append((tag, evaluate(cfg, res.model, res.heads, test)))
    stamp(f"{tag} fine-tuned")

print(f"\n{'model':<20}{'KWS acc %':>10}{'SV EER %':>10}")
for tag, ev in rows:
    cells = {r.task: f"{r.value:10.2f}" for r in ev.reports}
    print(f"{tag:<20}{cells.get(KWS, '         -')}{cells.get(SV, '         -')}")
