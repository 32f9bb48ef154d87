"""Synthetic grounded corpora, vocabularies, split manifests and file IO."""
