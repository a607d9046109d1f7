"""Unified text-to-image generation and instruction editing at desk scale.

A compact velocity-prediction UNet is trained with flow matching under an
in-context two-panel conditioning scheme, progressed through a task
curriculum (t2i -> edit -> unified -> sft), aligned with toy rewards via
ReLU-truncated reward feedback, and distilled into a 4-step guidance-free
student by distribution matching.
"""

__version__ = "0.1.0"
