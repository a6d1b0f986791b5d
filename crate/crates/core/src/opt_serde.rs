//! `Option` fields written as `"none"` when absent, so configs formats that
//! drop nulls (TOML) still round-trip through `#[serde(default)]` structs.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

#[derive(Deserialize)]
#[serde(untagged)]
enum Repr<T> {
    Value(T),
    Word(String),
}

pub fn serialize<T: Serialize, S: Serializer>(v: &Option<T>, s: S) -> Result<S::Ok, S::Error> {
    match v {
        Some(x) => x.serialize(s),
        None => s.serialize_str("none"),
    }
}

pub fn deserialize<'de, T: Deserialize<'de>, D: Deserializer<'de>>(d: D) -> Result<Option<T>, D::Error> {
    match Repr::<T>::deserialize(d)? {
        Repr::Value(x) => Ok(Some(x)),
        Repr::Word(w) if w == "none" => Ok(None),
        Repr::Word(w) => Err(serde::de::Error::custom(format!("expected a value or \"none\", got \"{w}\""))),
    }
}
