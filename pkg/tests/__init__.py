# Tests for sparse_view_recon
