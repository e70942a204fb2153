"""Melodic embeddings of folk-song pitch contours.

Parse tracker output, normalize it to the song's tonic, train a small
convolutional encoder with a triplet objective, and score embeddings
against labels by similarity ranking and random-forest accuracy.
"""

__version__ = "0.1.0"
