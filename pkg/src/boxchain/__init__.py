"""boxchain: select-then-answer document QA over layout boxes.

The pipeline segments a document image into indexed layout boxes, asks a
multimodal model which boxes matter for a question (stage 1, on an indexed
overlay), then asks it to answer from an image where everything outside the
selected boxes is blurred (stage 2). The package also ships the training-data
generator with rule-based QA and a human review queue, plus the evaluation
metric suite used to score runs.
"""

__version__ = "0.1.0"
