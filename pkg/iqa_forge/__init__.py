"""No-reference image quality assessment toolkit: distortion synthesis, MOS
harmonization, class-weighted regression training and PLCC/SROCC evaluation."""

__version__ = "1.0.0"
