"""Volume files, preprocessing, phantoms, patches and splits."""
