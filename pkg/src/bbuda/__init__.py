"""Black-box unsupervised domain adaptation for image segmentation.

A frozen source model (the teacher) is reachable only through per-pixel
class probabilities. A student network is trained on unlabelled target
images against exponentially decaying teacher/student mixup pseudo labels
with KL distillation plus entropy minimisation.
"""

__version__ = "0.1.0"
