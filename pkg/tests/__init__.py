"""Test suite for PatchLock."""
