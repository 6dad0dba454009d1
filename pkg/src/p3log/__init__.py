"""Pseudonymous blockchain usage log.

Participants record data usages on a shared proof-of-work chain under
one-time pseudonyms. Each block carries two pseudonyms and two encrypted
copies of the same usage record. A non-repudiable exchange protocol with
probabilistic fairness governs how a datum is handed over and logged, and
erasure works by deleting the local identity link for a pseudonym, which
anonymizes the immutable on-chain entry.
"""

__version__ = "0.1.0"

from .errors import P3Error

__all__ = ["P3Error", "__version__"]
