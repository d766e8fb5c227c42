"""Semi-blind image deblurring with untrained image and residual priors.

Modules:
    tensor       -- minimal reverse-mode autodiff, layers and Adam
    signal_ops   -- periodic convolution, DCT, TV, soft-thresholding, metrics
    degradation  -- blur kernels, kernel bias, blur + noise simulation
    networks     -- encoder-decoder generators (sigmoid / soft-shrinkage heads)
    solver       -- the alternating minimization loop and ablation modes
    experiments  -- single runs, bias sweeps and ablation matrices
    cli          -- command-line interface
"""

__version__ = "0.1.0"
