//! Name-keyed registries of interchangeable strategies.
//!
//! Each algorithm family (guidance schedules, denoisers, band consistency
//! operators, reconstruction methods, ...) exposes a trait; concrete variants
//! are registered under a stable name and selected at runtime from config or
//! command-line flags.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

pub type Factory<T, A> = Box<dyn Fn(&A) -> Result<Box<T>> + Send + Sync>;

pub struct Registry<T: ?Sized, A = ()> {
    kind: &'static str,
    entries: BTreeMap<String, Factory<T, A>>,
}

impl<T: ?Sized, A> Registry<T, A> {
    pub fn new(kind: &'static str) -> Self {
        Self {
            kind,
            entries: BTreeMap::new(),
        }
    }

    pub fn register<F>(&mut self, name: &str, factory: F) -> &mut Self
    where
        F: Fn(&A) -> Result<Box<T>> + Send + Sync + 'static,
    {
        self.entries.insert(name.to_string(), Box::new(factory));
        self
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.keys().map(String::as_str).collect()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn create(&self, name: &str, args: &A) -> Result<Box<T>> {
        match self.entries.get(name) {
            Some(factory) => factory(args),
            None => Err(Error::UnknownStrategy {
                kind: self.kind,
                name: name.to_string(),
                available: self.names().join(", "),
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    trait Greeter {
        fn greet(&self) -> String;
    }
    struct Hello;
    impl Greeter for Hello {
        fn greet(&self) -> String {
            "hello".into()
        }
    }

    #[test]
    fn unknown_name_lists_alternatives() {
        let mut reg: Registry<dyn Greeter> = Registry::new("greeter");
        reg.register("hello", |_| Ok(Box::new(Hello)));
        assert_eq!(reg.create("hello", &()).unwrap().greet(), "hello");
        let err = reg.create("bye", &()).err().unwrap().to_string();
        assert!(err.contains("hello"), "{err}");
    }
}
