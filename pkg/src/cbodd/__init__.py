"""Cross-branch orthogonal deepfake detection at desk scale.

A trainable per-frame detector: three encoder branches (localized
spatial, multi-scale global context, complementary emotion), feature
disentanglement into shared/unique subspaces via orthogonality penalties,
concatenation fusion, and majority-vote video verdicts -- plus a
synthetic two-domain corpus so within- vs cross-domain generalization is
measurable end to end.
"""

__version__ = "0.1.0"
