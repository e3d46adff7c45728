# Puerta de autoridad para clasificadores de imágenes
# Trigger derivado de una huella de hardware simulada
