"""
Study runners: rotation representation ablation, training-set size sweep and
class-information corruption. Each writes raw_results.json, summary.csv and
report.md into its output directory.
"""
