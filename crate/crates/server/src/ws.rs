use std::sync::Arc;

use axum::extract::ws::{CloseFrame, Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, State};
use axum::response::Response;
use futures_util::{SinkExt, StreamExt};
use serde::Deserialize;
use tokio::sync::broadcast;

use agentloom_core::store::EntityKind;

use crate::{Inbound, SessionBus, SharedState, CLOSE_OVERFLOW, CLOSE_PROTOCOL_ERROR, WS_PROTOCOL};

#[derive(Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum InboundFrame {
    HumanInput { content: String },
    Cancel,
}

pub(crate) async fn subscribe(ws: WebSocketUpgrade, State(st): State<SharedState>, Path(id): Path<String>) -> Response {
    let ws = ws.protocols([WS_PROTOCOL]);
    if st.store.get(EntityKind::Session, &id).is_err() {
        return ws.on_upgrade(move |socket| close(socket, CLOSE_PROTOCOL_ERROR, format!("unknown session `{id}`")));
    }
    let bus = st.bus(&id);
    // subscribe before the handshake completes so no event is missed
    let rx = bus.events.subscribe();
    ws.on_upgrade(move |socket| pump(socket, bus, rx))
}

async fn close(mut socket: WebSocket, code: u16, reason: String) {
    let frame = CloseFrame {
        code,
        reason: reason.into(),
    };
    let _ = socket.send(Message::Close(Some(frame))).await;
}

async fn pump(socket: WebSocket, bus: Arc<SessionBus>, mut rx: broadcast::Receiver<Arc<str>>) {
    let (mut tx, mut inbound) = socket.split();
    loop {
        tokio::select! {
            event = rx.recv() => match event {
                Ok(frame) => {
                    if tx.send(Message::Text(frame.as_ref().into())).await.is_err() {
                        break;
                    }
                }
                Err(broadcast::error::RecvError::Lagged(skipped)) => {
                    tracing::warn!(skipped, "subscriber fell behind; closing");
                    let frame = CloseFrame {
                        code: CLOSE_OVERFLOW,
                        reason: "event buffer overflow".into(),
                    };
                    let _ = tx.send(Message::Close(Some(frame))).await;
                    break;
                }
                Err(broadcast::error::RecvError::Closed) => break,
            },
            msg = inbound.next() => match msg {
                Some(Ok(Message::Text(text))) => match serde_json::from_str::<InboundFrame>(&text) {
                    Ok(InboundFrame::HumanInput { content }) => {
                        if !bus.deliver(Inbound::Text(content)) {
                            tracing::debug!("human input with no run in progress");
                        }
                    }
                    Ok(InboundFrame::Cancel) => {
                        bus.deliver(Inbound::Cancel);
                    }
                    Err(e) => tracing::debug!(error = %e, "ignoring malformed frame"),
                },
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break,
                Some(Ok(_)) => {}
            },
        }
    }
}
