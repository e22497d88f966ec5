"""Source training, a served black-box teacher and both adaptation presets, in one process.

The student only ever sees the teacher through a socket. Uses the shipped
recipe on the default benchmark; about 2.5 minutes on one core.

    python3 demos/walkthrough.py
"""

import argparse
import time

from bbuda import report
from bbuda.checkpoint import save_checkpoint
from bbuda.config import ADAPT_DEFAULTS, resolve_run_config
from bbuda.metrics import evaluate
from bbuda.synthdata import SOURCE_SPEC, TARGET_SPEC, make_splits
from bbuda.teacher import InProcessTeacher, RemoteTeacher, TeacherServer
from bbuda.trainer import adapt_target, train_source


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="walkthrough-teacher.ckpt")
    args = ap.parse_args()

    src_train, src_test = make_splits(SOURCE_SPEC)
    tgt_train, tgt_test = make_splits(TARGET_SPEC)

    t0 = time.time()
    teacher_ckpt = train_source(resolve_run_config(), src_train)
    save_checkpoint(teacher_ckpt, args.out)
    local = InProcessTeacher(args.out)
    print(f"teacher trained in {time.time() - t0:.0f}s: "
          f"source Dice {evaluate(local, src_test).regions['whole'].dice_mean:.4f}, "
          f"target Dice {evaluate(local, tgt_test).regions['whole'].dice_mean:.4f}")

    server = TeacherServer(args.out, ("127.0.0.1", 0))
    server.start_background()
    evals = {}
    try:
        with RemoteTeacher("127.0.0.1", server.port) as remote:
            evals["source-only"] = evaluate(remote, tgt_test).to_json_dict(method="source-only")
            unlabeled = [s.unlabeled() for s in tgt_train]
            for preset, method in (("bbuda-ent", "BBUDA-Ent"), ("bbuda", "BBUDA")):
                cfg = resolve_run_config(base=ADAPT_DEFAULTS, preset=preset)
                t0 = time.time()
                student, reports = adapt_target(cfg, remote, unlabeled)
                rep = evaluate(student.build_net(), tgt_test)
                evals[method] = rep.to_json_dict(method=method)
                last = reports[-1]
                print(f"{method}: {len(reports)} iterations in {time.time() - t0:.0f}s, "
                      f"final kl {last.kl:.4f} entropy {last.entropy:.4f}, "
                      f"whole Dice {rep.regions['whole'].dice_mean:.4f}, confidence {rep.confidence:.4f}")
    finally:
        server.stop()

    print()
    print(report.render_text(report.build(list(evals.values()))))


if __name__ == "__main__":
    main()
