# Routers for the HTTP surface
