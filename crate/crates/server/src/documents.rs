use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::header;
use axum::response::{IntoResponse, Response};

use agentloom_core::schema::{self, parse_workflow};
use agentloom_core::store::{self as store, EntityKind};

use crate::api::{self, ApiError};
use crate::SharedState;

fn attachment(name: &str, body: String) -> Response {
    let safe: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    (
        [
            (header::CONTENT_TYPE, "application/json".to_string()),
            (header::CONTENT_DISPOSITION, format!("attachment; filename=\"{safe}.json\"")),
        ],
        body,
    )
        .into_response()
}

pub(crate) async fn export_workflow(State(st): State<SharedState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let spec = store::resolve_workflow(st.store.as_ref(), &id)?;
    let text = schema::export_workflow(&spec)?;
    Ok(attachment(&spec.workflow.name, text))
}

pub(crate) async fn export_gallery(
    State(st): State<SharedState>,
    Path((kind, id)): Path<(String, String)>,
) -> Result<Response, ApiError> {
    let kind: EntityKind = kind
        .parse()
        .or_else(|_| EntityKind::from_plural(&kind).ok_or(()))
        .map_err(|_| ApiError::not_found(format!("unknown entity kind `{kind}`")))?;
    let text = store::export_gallery(st.store.as_ref(), kind, &id)?;
    Ok(attachment(&format!("{kind}-{id}"), text))
}

pub(crate) async fn import_gallery(State(st): State<SharedState>, body: Bytes) -> Result<Response, ApiError> {
    let doc = std::str::from_utf8(&body).map_err(|_| ApiError::bad_request("body is not UTF-8"))?;
    Ok(api::created(store::import_gallery(st.store.as_ref(), doc)?))
}

/// Parses and validates a workflow document without storing it.
pub(crate) async fn validate(body: Bytes) -> Result<Response, ApiError> {
    let doc = std::str::from_utf8(&body).map_err(|_| ApiError::bad_request("body is not UTF-8"))?;
    let spec = parse_workflow(doc)?;
    Ok(api::ok(schema::validate(&spec)))
}
