# Empty file.