# Standard-plane regression for CBCT volumes
