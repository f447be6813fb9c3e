# PCAg network simulator package
