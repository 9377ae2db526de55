"""petverify: multimodal embedding fusion and verification metrics.

Library layout:

* core       shared record/config types and the error vocabulary
* store      .pvem binary container and canonical JSON i/o
* synth      seeded synthetic identity populations
* sampler    balanced identity batch planning
* losses     triplet + variance objective with analytic gradients
* fusion     four fusion heads with exact backward passes
* trainer    Adam training loop over fused embeddings
* evalproto  capped pair protocol, ROC AUC, EER, top-k
* stats      McNemar paired comparison
* report     tables, CSV and figures over metric reports
* cli        the petverify command
"""

__version__ = "0.1.0"
