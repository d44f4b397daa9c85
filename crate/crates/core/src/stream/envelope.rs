use std::fmt;

use base64::Engine as _;
use serde::de::{self, MapAccess, Visitor};
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::StreamError;

/// Nanoseconds since the Unix epoch.
pub type TimestampNs = i64;

pub const NANOS_PER_SEC: i64 = 1_000_000_000;

pub fn secs_to_ns(secs: f64) -> i64 {
    (secs * NANOS_PER_SEC as f64).round() as i64
}

pub fn ns_to_secs(ns: i64) -> f64 {
    ns as f64 / NANOS_PER_SEC as f64
}

/// Message body: a flat list of named numeric fields, or an opaque byte block.
///
/// Fields encode as a JSON object of numbers in insertion order. Bytes encode
/// as `{"content_type": "...", "data_b64": "..."}`; the two shapes are told
/// apart by value type, since field values are always numbers.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Fields(Vec<(String, f64)>),
    Bytes { content_type: String, data: Vec<u8> },
}

impl Payload {
    pub fn fields<I, K>(fields: I) -> Self
    where
        I: IntoIterator<Item = (K, f64)>,
        K: Into<String>,
    {
        Payload::Fields(fields.into_iter().map(|(k, v)| (k.into(), v)).collect())
    }

    pub fn json<T: Serialize>(value: &T) -> Self {
        Payload::Bytes {
            content_type: "application/json".to_string(),
            data: serde_json::to_vec(value).expect("serializable value"),
        }
    }

    pub fn field(&self, name: &str) -> Option<f64> {
        match self {
            Payload::Fields(fields) => fields.iter().find(|(k, _)| k == name).map(|(_, v)| *v),
            Payload::Bytes { .. } => None,
        }
    }

    pub fn field_names(&self) -> Option<Vec<&str>> {
        match self {
            Payload::Fields(fields) => Some(fields.iter().map(|(k, _)| k.as_str()).collect()),
            Payload::Bytes { .. } => None,
        }
    }

    pub fn values(&self) -> Option<impl Iterator<Item = f64> + '_> {
        match self {
            Payload::Fields(fields) => Some(fields.iter().map(|(_, v)| *v)),
            Payload::Bytes { .. } => None,
        }
    }

    pub fn decode_json<T: serde::de::DeserializeOwned>(&self) -> Option<T> {
        match self {
            Payload::Bytes { data, .. } => serde_json::from_slice(data).ok(),
            Payload::Fields(_) => None,
        }
    }

    pub fn validate(&self, schema_hint: Option<&[String]>) -> Result<(), StreamError> {
        match self {
            Payload::Fields(fields) => {
                for (name, value) in fields {
                    if !value.is_finite() {
                        return Err(StreamError::InvalidPayload(format!(
                            "field {name} is not finite"
                        )));
                    }
                }
                if let Some(schema) = schema_hint {
                    for (name, _) in fields {
                        if !schema.iter().any(|s| s == name) {
                            return Err(StreamError::InvalidPayload(format!(
                                "field {name} not in topic schema"
                            )));
                        }
                    }
                }
                Ok(())
            }
            Payload::Bytes { content_type, .. } => {
                if content_type.is_empty() {
                    Err(StreamError::InvalidPayload("empty content_type".into()))
                } else {
                    Ok(())
                }
            }
        }
    }
}

impl Serialize for Payload {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            Payload::Fields(fields) => {
                let mut map = serializer.serialize_map(Some(fields.len()))?;
                for (k, v) in fields {
                    map.serialize_entry(k, v)?;
                }
                map.end()
            }
            Payload::Bytes { content_type, data } => {
                let mut map = serializer.serialize_map(Some(2))?;
                map.serialize_entry("content_type", content_type)?;
                map.serialize_entry(
                    "data_b64",
                    &base64::engine::general_purpose::STANDARD.encode(data),
                )?;
                map.end()
            }
        }
    }
}

enum NumOrStr {
    Num(f64),
    Str(String),
}

impl<'de> Deserialize<'de> for NumOrStr {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = NumOrStr;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a number or a string")
            }
            fn visit_f64<E>(self, v: f64) -> Result<NumOrStr, E> {
                Ok(NumOrStr::Num(v))
            }
            fn visit_i64<E>(self, v: i64) -> Result<NumOrStr, E> {
                Ok(NumOrStr::Num(v as f64))
            }
            fn visit_u64<E>(self, v: u64) -> Result<NumOrStr, E> {
                Ok(NumOrStr::Num(v as f64))
            }
            fn visit_str<E>(self, v: &str) -> Result<NumOrStr, E> {
                Ok(NumOrStr::Str(v.to_string()))
            }
            fn visit_string<E>(self, v: String) -> Result<NumOrStr, E> {
                Ok(NumOrStr::Str(v))
            }
        }
        deserializer.deserialize_any(V)
    }
}

impl<'de> Deserialize<'de> for Payload {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = Payload;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("an object of numeric fields or {content_type, data_b64}")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<Payload, A::Error> {
                let mut fields = Vec::new();
                let mut strings = Vec::new();
                while let Some(key) = map.next_key::<String>()? {
                    match map.next_value::<NumOrStr>()? {
                        NumOrStr::Num(v) => fields.push((key, v)),
                        NumOrStr::Str(s) => strings.push((key, s)),
                    }
                }
                if strings.is_empty() {
                    return Ok(Payload::Fields(fields));
                }
                if !fields.is_empty() || strings.len() != 2 {
                    return Err(de::Error::custom("mixed or unknown payload shape"));
                }
                let get = |name: &str| {
                    strings
                        .iter()
                        .find(|(k, _)| k == name)
                        .map(|(_, v)| v.clone())
                        .ok_or_else(|| de::Error::custom(format!("missing {name}")))
                };
                let content_type = get("content_type")?;
                let data = base64::engine::general_purpose::STANDARD
                    .decode(get("data_b64")?)
                    .map_err(de::Error::custom)?;
                Ok(Payload::Bytes { content_type, data })
            }
        }
        deserializer.deserialize_map(V)
    }
}

/// One timestamped message on a topic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEnvelope {
    pub topic: String,
    pub source_id: String,
    pub seq: u64,
    #[serde(rename = "ts_ns")]
    pub timestamp_ns: TimestampNs,
    pub payload: Payload,
}

impl SampleEnvelope {
    pub fn new(
        topic: impl Into<String>,
        source_id: impl Into<String>,
        seq: u64,
        timestamp_ns: TimestampNs,
        payload: Payload,
    ) -> Self {
        Self {
            topic: topic.into(),
            source_id: source_id.into(),
            seq,
            timestamp_ns,
            payload,
        }
    }

    /// Canonical wire encoding (one JSON object, no trailing newline).
    pub fn to_canonical_json(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("envelope is always serializable")
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, StreamError> {
        serde_json::from_slice(bytes).map_err(|e| StreamError::Decode(e.to_string()))
    }

    pub fn validate(&self, schema_hint: Option<&[String]>) -> Result<(), StreamError> {
        if self.timestamp_ns <= 0 {
            return Err(StreamError::InvalidPayload(
                "timestamp_ns must be positive".into(),
            ));
        }
        self.payload.validate(schema_hint)
    }
}
