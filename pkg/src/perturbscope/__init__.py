"""Black-box analysis of image-protection perturbations.

Synthesizes controlled noise/mask perturbations, probes clean/perturbed
pairs with occlusion and Fourier analysis, and runs entropy-threshold
detection and subtraction purification over pluggable reconstructors.
"""

__version__ = "0.1.0"
