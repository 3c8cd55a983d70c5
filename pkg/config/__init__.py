# Runtime configuration: environment settings and the default simulator deployment
