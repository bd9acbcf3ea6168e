# Tests for the JAKET desk trainer
