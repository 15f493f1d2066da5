"""Point clouds and images through one Transformer backbone.

A graph-convolution tokenizer turns raw point clouds into tokens, an
image-patch tokenizer does the same for images, and a shared pre-norm
Transformer encoder processes both. Backbone weights trained on images
can be transplanted into the point-cloud model through a neutral
checkpoint format, then finetuned (optionally with the backbone frozen).
Everything runs on numpy with an in-repo reverse-mode autograd engine so
gradients can be audited against central finite differences.
"""

import os as _os

# Honor the thread cap before numpy is imported anywhere in the package;
# BLAS pools read these variables once at load time.
if "P4P_THREADS" in _os.environ:
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS",
                 "NUMEXPR_NUM_THREADS"):
        _os.environ.setdefault(_var, _os.environ["P4P_THREADS"])

__version__ = "0.1.0"
