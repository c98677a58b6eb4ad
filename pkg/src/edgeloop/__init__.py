"""Learning edge detectors from video motion, without human labels.

Submodules: ``imgproc`` (gradients, NMS, superpixels), ``matching``
(semi-dense matches and frame filtering), ``flow`` (edge-aware
interpolation), ``sedge`` (structured forest detector), ``motionedge``
(motion edges and their alignment), ``pipeline`` (the iterative loop),
``evaluation`` (boundary benchmark) and ``cli``.
"""

__version__ = "0.1.0"
