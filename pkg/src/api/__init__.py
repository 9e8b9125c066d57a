# API package

