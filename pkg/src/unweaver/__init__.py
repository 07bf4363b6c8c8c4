"""Online unweaving of activity streams into threads.

A stream of clip feature vectors is parsed online into activity threads by a
neural controller operating an explicit thread bank. The package includes
the synthetic-story self-supervision pipeline, teacher-forced training with
exact hand-checked gradients, partition metrics with closed-form chance
baselines, non-learnt baselines, a CLI, and the annotation service.
"""

__version__ = "0.1.0"
