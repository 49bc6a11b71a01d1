"""Speaker diarization and vocalization classification for family audio."""

__version__ = "0.1.0"
