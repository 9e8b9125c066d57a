# Source package

