//! Holds the `acceptance` test target, which checks the summarizer end to end
//! and prints one PASS/FAIL line per criterion. It lives in its own package so
//! that cargo runs it after the unit and integration tests of the other crates.
