use std::collections::VecDeque;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::IntoResponse;
use axum::routing::get;
use axum::Router;
use futures_util::{SinkExt, StreamExt};
use tokio::net::TcpListener;
use tokio::sync::{mpsc, Notify};

use crate::live::{Live, ServiceContext};
use crate::protocol::ServerMessage;

/// Forecast frames allowed to wait for a slow client; older ones are dropped.
pub const MAX_QUEUED_FORECASTS: usize = 2;

/// Outbound frames of one connection. State updates are never dropped;
/// forecast updates are dropped oldest-first once `MAX_QUEUED_FORECASTS`
/// are waiting.
#[derive(Default)]
pub struct Outbox {
    queue: Mutex<(VecDeque<ServerMessage>, bool)>,
    notify: Notify,
}

impl Outbox {
    pub fn push(&self, msg: ServerMessage) {
        let mut q = self.queue.lock().unwrap();
        if msg.kind() == "forecast_update" {
            let waiting = q.0.iter().filter(|m| m.kind() == "forecast_update").count();
            if waiting >= MAX_QUEUED_FORECASTS {
                let i =
                    q.0.iter()
                        .position(|m| m.kind() == "forecast_update")
                        .unwrap();
                q.0.remove(i);
            }
        }
        q.0.push_back(msg);
        drop(q);
        self.notify.notify_one();
    }

    pub fn close(&self) {
        self.queue.lock().unwrap().1 = true;
        self.notify.notify_one();
    }

    pub fn len(&self) -> usize {
        self.queue.lock().unwrap().0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Next frame, or `None` once closed and drained.
    pub async fn pop(&self) -> Option<ServerMessage> {
        loop {
            {
                let mut q = self.queue.lock().unwrap();
                if let Some(m) = q.0.pop_front() {
                    return Some(m);
                }
                if q.1 {
                    return None;
                }
            }
            self.notify.notified().await;
        }
    }
}

#[derive(Clone)]
struct AppState {
    ctx: Arc<ServiceContext>,
    tick: Duration,
}

pub fn router(ctx: Arc<ServiceContext>, tick_hz: f64) -> Router {
    let tick = Duration::from_secs_f64(1.0 / tick_hz.max(1e-3));
    Router::new()
        .route("/ws", get(upgrade))
        .route("/health", get(|| async { "ok" }))
        .with_state(AppState { ctx, tick })
}

async fn upgrade(ws: WebSocketUpgrade, State(st): State<AppState>) -> impl IntoResponse {
    ws.on_upgrade(move |socket| connection(socket, st))
}

async fn connection(socket: WebSocket, st: AppState) {
    let (mut sink, mut stream) = socket.split();
    let outbox = Arc::new(Outbox::default());
    let writer = {
        let outbox = outbox.clone();
        tokio::spawn(async move {
            while let Some(m) = outbox.pop().await {
                if sink.send(Message::Text(m.to_json().into())).await.is_err() {
                    break;
                }
            }
            let _ = sink.close().await;
        })
    };
    let (ftx, mut frx) = mpsc::unbounded_channel();
    let mut live = Live::new(st.ctx.clone());
    let mut ticker = tokio::time::interval(st.tick);
    ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    loop {
        tokio::select! {
            incoming = stream.next() => match incoming {
                Some(Ok(Message::Text(t))) => live.handle_text(&t).into_iter().for_each(|m| outbox.push(m)),
                Some(Ok(Message::Binary(_))) => outbox.push(ServerMessage::error("binary frames are not supported")),
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break,
                Some(Ok(_)) => {}
            },
            _ = ticker.tick() => {
                let (msgs, job) = live.tick();
                msgs.into_iter().for_each(|m| outbox.push(m));
                if let Some(job) = job {
                    let tx = ftx.clone();
                    tokio::task::spawn_blocking(move || {
                        let _ = tx.send(job.run());
                    });
                }
            }
            Some((episode, result)) = frx.recv() => {
                live.accept_forecast(episode, result).into_iter().for_each(|m| outbox.push(m));
            }
        }
    }
    outbox.close();
    let _ = writer.await;
}

/// Serves `/ws` (sessions) and `/health` until the task is cancelled.
pub async fn serve(
    listener: TcpListener,
    ctx: Arc<ServiceContext>,
    tick_hz: f64,
) -> std::io::Result<()> {
    axum::serve(listener, router(ctx, tick_hz)).await
}

/// Binds `addr`; port conflicts surface here rather than at serve time.
pub async fn bind(addr: SocketAddr) -> std::io::Result<TcpListener> {
    TcpListener::bind(addr).await
}
