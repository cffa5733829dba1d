"""Shared helpers for the test suite (re-exported from the package so the
tests and the CLI verification paths use identical gradcheck machinery)."""

from cosh3d.verification import central_difference, gradcheck_error, kink_free

__all__ = ["central_difference", "gradcheck_error", "kink_free"]
