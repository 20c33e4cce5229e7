"""Dynamic stealthy backdoor attacks on self-supervised encoders.

Inner/outer collaborative training of a trigger generator and a backdoored
encoder, plus stealth metrics, downstream evaluation, and a defense harness.
"""

__version__ = "0.1.0"
