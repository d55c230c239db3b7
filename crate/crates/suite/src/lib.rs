//! Home of the `acceptance` test target, kept in its own package so it
//! runs after the library suites.
