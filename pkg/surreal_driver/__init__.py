"""surreal-driver.

Deterministic urban-driving micro-simulator with an LLM-style driver agent:
atomic scenes, atomic actions, a two-tier safety shield, short-term memory
and coach-generated long-term guidelines.
"""

__version__ = "0.1.0"
