"""Test suite and fixture data for community_storage."""
