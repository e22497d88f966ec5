"""Print the adaptation schedule and the loss terms on a toy probability map.

Runs in well under a second:

    python3 demos/schedule_and_losses.py
"""

import numpy as np

from bbuda import tensor as T
from bbuda.emd import AdaptSchedule, alpha_weight, emd_lambda, entropy_loss, kl_distillation_loss, total_loss


def main():
    sched = AdaptSchedule(total_iters=600)
    print("iter   lambda   alpha")
    for it in (0, 60, 120, 300, 480, 600):
        print(f"{it:4d}  {emd_lambda(sched, it):.4f}  {alpha_weight(sched, it):.3f}")

    rng = np.random.default_rng(0)
    teacher = rng.dirichlet(np.ones(4), size=(8, 8)).transpose(2, 0, 1).astype(np.float32)
    student = T.softmax(T.Tensor(rng.normal(size=(1, 4, 8, 8)).astype(np.float32), requires_grad=True))

    print(f"\nKL(teacher || teacher) = {kl_distillation_loss(T.Tensor(teacher), teacher).item():.2e}")
    print(f"entropy of a uniform map = {entropy_loss(T.Tensor(np.full((4, 2, 2), 0.25, np.float32))).item():.4f}"
          f" (ln 4 = {np.log(4):.4f})")

    # the pseudo label slides from the teacher to the student's own prediction
    for it in (0, 300, 600):
        _, rep = total_loss(student, teacher[None], sched, it)
        print(f"iter {it:3d}: kl {rep.kl:.4f}  entropy {rep.entropy:.4f}  "
              f"alpha {rep.alpha_used:.2f}  total {rep.total:.4f}")


if __name__ == "__main__":
    main()
