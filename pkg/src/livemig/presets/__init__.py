"""Named cost-table presets shipped as YAML."""
