//! Python bindings for the lcasr toolkit. Placeholder until the core crate
//! surface settles; the PyO3 module lives here.
